use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the unitkit library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("size mismatch: header declares {expected} payload bytes, found {found}")]
    SizeMismatch { expected: u64, found: u64 },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("scoring failed for pair {pair_id}: {message}")]
    Scoring { pair_id: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
