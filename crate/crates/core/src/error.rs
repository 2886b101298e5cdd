use std::path::PathBuf;

use crate::autodiff::ParamId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape is empty")]
    EmptyTape,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(ParamId),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("task `{0}` already exists")]
    DuplicateTask(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("training diverged: {method} produced a non-finite loss in {phase} epoch {epoch}")]
    Divergence {
        method: String,
        phase: &'static str,
        epoch: usize,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
