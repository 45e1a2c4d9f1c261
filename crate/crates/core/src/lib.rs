//! Desk-scale volumetric segmentation engine.
//!
//! The crate provides a dense `f64` tensor type with exact hand-written
//! backward passes for every primitive, a windowed-attention encoder with
//! multi-scale convolutional fusion, a U-Net style decoder, compound
//! CE + Dice training losses, overlap metrics, and a synthetic
//! spine-phantom generator for end-to-end benchmarks. Everything is
//! deterministic: a (config, seed, input) triple fully determines outputs.

pub mod attention;
pub mod augment;
pub mod error;
pub mod fusion;
pub mod gradcheck;
mod init;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod phantom;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod threading;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{ParamId, ParameterStore, Tensor};
