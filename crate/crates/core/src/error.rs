use std::io;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum DfarError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("incompatible: {0}")]
    Compatibility(String),
    #[error("unsupported: {0}")]
    Capability(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DfarError>;
