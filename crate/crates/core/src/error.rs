//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PolarError>;

#[derive(Debug, Error)]
pub enum PolarError {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("index {index} out of range (bound {bound}) in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("empty KV cache for sequence {0}")]
    EmptyCache(usize),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("recall undefined: label set has no active units")]
    UndefinedRecall,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl PolarError {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        PolarError::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        PolarError::Argument(msg.into())
    }
}
