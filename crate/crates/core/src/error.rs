use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("index {index} out of range (len {len})")]
    Range { index: usize, len: usize },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("parse error at row {row}, column {column}: {msg}")]
    Parse { row: usize, column: usize, msg: String },
    #[error("training error: {0}")]
    Training(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("windowing error: {0}")]
    Windowing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
