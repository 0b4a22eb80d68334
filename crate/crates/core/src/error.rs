use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure at step {step}: {message}")]
    NumericFailure { step: usize, message: String },

    /// A min-max term was requested for a class with no stored features.
    #[error("feature buffer has no entries for class {class}")]
    BufferUnderflow { class: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dim_mismatch(what: &str, expected: usize, got: usize) -> Self {
        Error::InvalidArgument(format!("{what}: expected dimension {expected}, got {got}"))
    }
}
