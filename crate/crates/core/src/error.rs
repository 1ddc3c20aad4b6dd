use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not fit the operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    /// Malformed sequence directory or annotation file.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Malformed or truncated checkpoint.
    #[error("checkpoint error: {detail} (byte offset {offset})")]
    Checkpoint { offset: usize, detail: String },

    /// A NaN/Inf showed up where a finite value was required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
