use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {tokens} tokens but {tags} slot tags")]
    Alignment {
        path: PathBuf,
        line: usize,
        tokens: usize,
        tags: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unsatisfiable: {0}")]
    Unsatisfiable(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("query budget {budget} exceeds pool of {pool}")]
    BudgetExceedsPool { budget: usize, pool: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged: {message}")]
    Diverged {
        message: String,
        /// Parameters before the failing step.
        last_good: Box<crate::model::ModelParams>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
