use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the batch harness: 2 for configuration
    /// problems, 3 for data problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) => 2,
            Error::Format { .. }
            | Error::Io { .. }
            | Error::Manifest { .. }
            | Error::Validation(_)
            | Error::Degenerate(_)
            | Error::Shape(_) => 3,
            Error::NonFinite(_) => 1,
        }
    }
}
