use std::path::PathBuf;

use crate::trainer::RoundTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("idx file {path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("missing class {0}")]
    MissingClass(u8),

    #[error("model diverged at round {round}: {reason}")]
    Diverged {
        round: u64,
        reason: String,
        /// Trace up to (and excluding) the offending update.
        trace: Vec<RoundTrace>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn idx(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Idx {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
