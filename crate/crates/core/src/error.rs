use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument or configuration value violates a documented bound.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("class {class} never occurs in the true labels")]
    MissingClass { class: usize },

    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: u64, reason: String },

    #[error("truncated payload at byte {offset}: expected {expected} more bytes")]
    Truncated { offset: u64, expected: u64 },

    #[error("label out of range at record {record}: {label} >= {num_classes}")]
    LabelOutOfRange {
        record: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("dimension mismatch at {location}: expected {expected}, found {found}")]
    DimensionMismatch {
        location: String,
        expected: usize,
        found: usize,
    },

    #[error("csv error at line {line}: {reason}")]
    Csv { line: u64, reason: String },

    /// A scenario document failed validation. `pointer` is a JSON pointer.
    #[error("invalid scenario at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("client {client_id} failed: {source}")]
    Client {
        client_id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// Configuration problems map to exit code 2, everything else to 1.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Parameter(_))
    }
}
