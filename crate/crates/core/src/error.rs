//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by dataset handling, model execution, training and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dim {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: loss term `{term}` became non-finite at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        term: String,
        epoch: usize,
        step: usize,
    },

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for an I/O error tagged with the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for a dimension-mismatch error.
    pub fn dim(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dim {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
