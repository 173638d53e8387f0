use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation failed for patient `{patient}`, field `{field}`: {reason}")]
    Validation {
        patient: String,
        field: String,
        reason: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("non-finite loss during gradient check")]
    NonFiniteLoss,

    #[error("C-index undefined: no comparable pairs")]
    UndefinedCIndex,

    #[error("log-rank test undefined: {0}")]
    UndefinedLogRank(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Whether the error stems from bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::InvalidArgument(_)
                | Error::Validation { .. }
                | Error::Schema(_)
                | Error::Checkpoint(_)
                | Error::Json(_)
        )
    }
}
