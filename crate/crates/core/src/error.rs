use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape { context: &'static str, expected: String, actual: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("{path}: line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("training diverged at step {step}: total loss is {value}")]
    Diverged { step: usize, value: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape { context, expected: expected.to_string(), actual: actual.to_string() }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { field, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
