use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed file: bad magic, unsupported version, truncation, inconsistent manifest.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Structurally valid input carrying values that break an invariant (NaN in ocean, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("position ({x}, {y}) lies outside the domain box")]
    OutsideDomain { x: f64, y: f64 },

    #[error("position ({x}, {y}) is not in an ocean cell")]
    NotOcean { x: f64, y: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
