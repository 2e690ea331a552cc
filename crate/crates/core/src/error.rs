use std::time::Duration;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument or a type invariant was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("latent dimension mismatch: oracle expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no seed for group {group} within {budget} oracle calls")]
    SeedNotFound { group: String, budget: u64 },

    #[error("calibration failed after {rounds} rounds; relative errors {errors:?}")]
    CalibrationFailed { rounds: usize, errors: Vec<f64> },

    #[error("oracle transport failure on request {id}: {message}")]
    Transport { id: u64, message: String },

    #[error("oracle protocol error: {message} (raw line: {raw:?})")]
    Protocol { message: String, raw: String },

    #[error("oracle request {id} timed out after {timeout:?}")]
    Timeout { id: u64, timeout: Duration },

    #[error("oracle {0} does not provide embeddings")]
    UnsupportedAudit(String),

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(line: usize, column: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            column,
            message: message.into(),
        }
    }
}
