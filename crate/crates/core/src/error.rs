use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },

    #[error("non-finite value in {stage} (step {index})")]
    NonFinite { stage: &'static str, index: usize },

    #[error("training diverged at update {update}: validation loss is not finite")]
    Diverged {
        update: usize,
        history: Vec<crate::training::HistoryRow>,
    },

    #[error("format error in `{blob}`: {reason}")]
    Format { blob: String, reason: String },

    #[error("checksum mismatch for `{0}`")]
    Checksum(String),

    #[error("missing split `{0}` in dataset container")]
    MissingSplit(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
