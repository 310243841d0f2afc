use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
    #[error("input does not look like {format}: {rejected} of {read} lines rejected")]
    FormatMismatch {
        format: &'static str,
        read: usize,
        rejected: usize,
    },
    #[error("malformed container: {0}")]
    Container(String),
    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: String, expected: String },
    #[error("container holds {found}, expected {expected}")]
    WrongKind { found: String, expected: String },
    #[error("undefined statistics: {0}")]
    UndefinedStatistics(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("embedding dimension {got} does not match configured {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty session: perform at least one action before asking for recommendations")]
    EmptySession,
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("vocabulary skew: checkpoint hash {checkpoint} != bundle hash {bundle}")]
    VocabularySkew { checkpoint: String, bundle: String },
    #[error("invalid event: {0:?}")]
    Validation(Vec<FieldError>),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] bimflow_nn::NnError),
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CoreError {
    let path = path.into();
    move |source| CoreError::Io { path, source }
}
