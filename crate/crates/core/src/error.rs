use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("valid mask selects no pixels")]
    EmptyMask,

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint does not match the requested model: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
}

pub type Result<T, E = FlowError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FlowError::Shape(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> FlowError {
    let path = path.into();
    move |source| FlowError::Io { path, source }
}
