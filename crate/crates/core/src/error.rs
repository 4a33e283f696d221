use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Caller violated a precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Malformed on-disk data (bad magic, version, truncation).
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    /// Well-formed file with invalid content.
    #[error("data error: {0}")]
    Data(String),
    /// A NaN or infinity showed up where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
