pub mod ssv;
pub mod slices;
