use std::io;

use thiserror::Error;

/// Errors raised across the detector stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("{op}: incompatible shapes {shapes}")]
    Dimension { op: &'static str, shapes: String },

    /// Invalid model or training configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Caller violated an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite or out-of-domain numeric input.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}; inputs dumped to {dump}")]
    NonFiniteLoss { step: usize, dump: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, shapes: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            shapes: shapes.into(),
        }
    }
}
