use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum KnitworkError {
    /// Tensor or image shapes do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Bad configuration (CLI flags, config file, manifests).
    #[error("config error: {0}")]
    Config(String),

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

    /// Checkpoint file is malformed or does not match the current config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, KnitworkError>;

impl KnitworkError {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        KnitworkError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        KnitworkError::Contract(msg.into())
    }
}
