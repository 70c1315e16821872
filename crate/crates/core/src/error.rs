use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}, row {row}: {message}")]
    Row {
        file: String,
        row: usize,
        message: String,
    },

    #[error("{file}: header mismatch, expected [{expected}] but found [{found}]")]
    Header {
        file: String,
        expected: String,
        found: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown covariate `{name}`; valid names: [{valid}]")]
    UnknownCovariate { name: String, valid: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("thresholds must be strictly increasing (violated at index {index})")]
    ThresholdOrder { index: usize },

    #[error("workshop {workshop} has not occurred at time index {time_index}")]
    WorkshopNotOccurred { workshop: usize, time_index: u8 },

    #[error("objective is not finite at the starting point")]
    NonFiniteStart,

    #[error("malformed draw cache: {0}")]
    DrawCache(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn row(file: &str, row: usize, message: impl Into<String>) -> Self {
        Error::Row {
            file: file.to_string(),
            row,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// True for failures caused by the file system rather than the content of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
