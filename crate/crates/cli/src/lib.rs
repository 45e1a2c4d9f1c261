//! Library half of the `spineseg` command-line tool.
//!
//! All command logic lives here so integration tests can drive it
//! directly; `main.rs` only parses arguments and maps errors to exit
//! codes (0 ok, 1 config/usage, 2 io, 3 divergence, 4 gradcheck failure).

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod optim;
pub mod trainer;

use spineseg_core::Error as CoreError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_GRADCHECK: i32 = 4;

/// An error carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> CliError {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> CliError {
        CliError::new(EXIT_CONFIG, message)
    }

    pub fn io(message: impl Into<String>) -> CliError {
        CliError::new(EXIT_IO, message)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> CliError {
        let code = match &err {
            CoreError::Io(_) | CoreError::Format { .. } => EXIT_IO,
            CoreError::NonFinite(_) => EXIT_DIVERGENCE,
            _ => EXIT_CONFIG,
        };
        CliError::new(code, err.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> CliError {
        CliError::new(EXIT_IO, err.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
