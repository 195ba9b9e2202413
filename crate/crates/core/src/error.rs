use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid hash parameters: {0}")]
    InvalidParams(String),

    #[error("band packing overflow: u * bits_per_index = {bits} bits, must be < 31")]
    PackingOverflow { bits: u32 },

    #[error("dimension {dim} is smaller than window size K = {k}")]
    DimensionTooSmall { dim: usize, k: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("cuckoo build failed after {attempts} attempts over {keys} keys")]
    CuckooBuild { attempts: usize, keys: usize },

    #[error("invalid decode config: {0}")]
    Config(String),

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
