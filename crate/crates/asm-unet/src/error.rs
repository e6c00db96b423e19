//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed arguments that violate an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input is structurally valid but numerically unusable (e.g. zero variance).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Malformed file contents: bad magic, truncation, unknown dtype.
    #[error("format error: {0}")]
    Format(String),

    /// Volume generation could not satisfy the requested topology.
    #[error("generation error: {0}")]
    Generation(String),

    /// Inconsistent or unsupported run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
