use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch-norm training needs at least 2 samples, got {0}")]
    BatchSize(usize),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("zero behavior probability for action {action} at step {step}")]
    DivisionHazard { step: usize, action: usize },

    #[error("model file rejected: {0}")]
    ModelFormat(String),

    #[error("io error on {path}: {source}")]
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
}

pub type Result<T> = std::result::Result<T, Error>;
