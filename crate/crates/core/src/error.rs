use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the message of shape and numeric errors with a location, e.g. `"ffd.stage_a"`.
    pub fn context(self, location: &str) -> Self {
        match self {
            Error::Shape(m) => Error::Shape(format!("{location}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{location}: {m}")),
            other => other,
        }
    }
}

/// Failures while reading a checkpoint file. Each variant maps to a distinct
/// error code so callers can tell corruption apart from version skew.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: String, expected: u32 },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("checkpoint manifest disagrees with payload for entry `{entry}`: {reason}")]
    Manifest { entry: String, reason: String },

    #[error("malformed checkpoint header: {0}")]
    Header(String),

    #[error("checkpoint dtype {found} does not match requested {requested}")]
    DType { found: String, requested: String },
}

impl CheckpointError {
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::Version { .. } => "E_CKPT_VERSION",
            CheckpointError::Integrity(_) => "E_CKPT_INTEGRITY",
            CheckpointError::Manifest { .. } => "E_CKPT_MANIFEST",
            CheckpointError::Header(_) => "E_CKPT_HEADER",
            CheckpointError::DType { .. } => "E_CKPT_DTYPE",
        }
    }
}
