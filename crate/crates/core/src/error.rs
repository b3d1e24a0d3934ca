use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("timestep {t} out of range [1, {max}]")]
    Index { t: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Peels off per-frame context to get at the underlying failure.
    pub fn root(&self) -> &Error {
        match self {
            Error::Frame { source, .. } => source.root(),
            other => other,
        }
    }
}
