use acd_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AcdError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AcdError>;

pub(crate) fn invalid(msg: impl Into<String>) -> AcdError {
    AcdError::Invalid(msg.into())
}
