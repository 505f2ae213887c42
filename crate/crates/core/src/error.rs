use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum JpuError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in layer {layer}: {what}")]
    Numeric { layer: usize, what: String },

    #[error("malformed data at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, JpuError>;

pub(crate) fn config_err(msg: impl Into<String>) -> JpuError {
    JpuError::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> JpuError {
    JpuError::Input(msg.into())
}

pub(crate) fn contract_err(msg: impl Into<String>) -> JpuError {
    JpuError::Contract(msg.into())
}
