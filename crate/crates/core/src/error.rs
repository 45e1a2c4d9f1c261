use thiserror::Error;

/// Errors produced by the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or operand shapes are incompatible.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Spatial geometry is invalid (non-integer output extents, indivisible
    /// grids, degenerate volumes).
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    /// A configuration constraint was violated.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A label volume contains values outside [0, K).
    #[error("invalid label: {0}")]
    InvalidLabel(String),

    /// A plain argument error (bad axis, bad index, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An operation was called in the wrong order (e.g. backward before
    /// forward).
    #[error("state error: {0}")]
    State(String),

    /// A binary file failed to parse; `offset` is the byte position of the
    /// first inconsistency.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub fn geometry(msg: impl Into<String>) -> Self {
        Error::InvalidGeometry(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
