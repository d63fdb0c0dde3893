use std::path::PathBuf;
use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Error, Debug)]
pub enum SelmagError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("non-finite loss at epoch {epoch} ({context})")]
    NonFiniteLoss { epoch: usize, context: String },

    #[error("invalid argument for {op}: {details}")]
    InvalidArgument { op: &'static str, details: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} line {line}: {details}")]
    Parse {
        path: PathBuf,
        line: usize,
        details: String,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("dataset validation failed: {0}")]
    Validation(String),

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, SelmagError>;

impl SelmagError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SelmagError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        SelmagError::Json {
            path: path.into(),
            source,
        }
    }
}
