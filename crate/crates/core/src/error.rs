use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GleanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GleanError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("failed to load image {path}: {reason}")]
    ImageLoad { path: PathBuf, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GleanError {
    pub fn shape(msg: impl Into<String>) -> Self {
        GleanError::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        GleanError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        GleanError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GleanError::Io {
            path: path.into(),
            source,
        }
    }
}
