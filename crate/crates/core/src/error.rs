//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training aborted at epoch {epoch}, batch {batch}: {msg}")]
    TrainAborted {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("parse error at byte offset {offset}: {msg}")]
    BinaryParse { offset: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub fn shape(
        op: &'static str,
        axis: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            axis,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
