use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("vocabulary build error: {0}")]
    Build(String),

    #[error("decode error: token id {id} outside vocabulary of size {size}")]
    Decode { id: u32, size: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("pooling error: {0}")]
    Pooling(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("projection error: {0}")]
    Projection(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {diagnostic}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        diagnostic: String,
    },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Record {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
