use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("{op}: row {row} has norm {norm:e}, below the degenerate threshold")]
    DegenerateRow {
        op: &'static str,
        row: usize,
        norm: f64,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward was already run on this tape; double backward is not supported")]
    DoubleBackward,

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("gradient found on teacher-side features `{0}`")]
    TeacherGradient(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure at iteration {iteration}: {source}")]
    Diverged {
        iteration: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("AUROC needs at least one positive and one negative label")]
    SingleClass,

    #[error("dataset entry `{path}`: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for failures caused by the numbers themselves rather than by
    /// configuration or I/O.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::DegenerateRow { .. } => true,
            Error::Diverged { .. } => true,
            _ => false,
        }
    }
}
