//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by encoding, file IO, the network, training and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or volume had dimensions incompatible with an operation.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A parameter value was outside its valid range.
    #[error("invalid argument in {context}: {message}")]
    InvalidArgument { context: String, message: String },

    /// An input collection that must be non-empty was empty.
    #[error("empty input in {context}: {message}")]
    EmptyInput { context: String, message: String },

    /// Geometry was too degenerate to process (e.g. rank-deficient point set).
    #[error("degenerate geometry in {context}: {message}")]
    DegenerateGeometry { context: String, message: String },

    /// A non-finite value (NaN or infinity) appeared where finite values are required.
    #[error("non-finite value in {context}: {message}")]
    NonFinite { context: String, message: String },

    /// A file could not be parsed.
    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// An IO operation failed. The cause lives in `source()` so error
    /// chains render it exactly once.
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A JSON document could not be read or written.
    #[error("json error in {context}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn invalid(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn empty(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::EmptyInput {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn degenerate(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::DegenerateGeometry {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
