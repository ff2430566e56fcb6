//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the training engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; carries both shapes and the operation name.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A shape/size argument that is invalid on its own.
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// Index out of range (gather/scatter rows, labels, block indices).
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },

    /// Non-finite value encountered where finiteness is required.
    #[error("{op}: non-finite value at {location}")]
    NonFinite { op: &'static str, location: String },

    /// Configuration problem; names the offending field.
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    /// Malformed file contents (IDX containers, checkpoints).
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), msg: msg.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
