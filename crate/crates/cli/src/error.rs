use acd_core::AcdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration or arguments; nothing has been written.
    #[error("configuration error: {0}")]
    Config(String),
    /// Training hit a non-finite loss, gradient or parameter.
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Run(_) => 1,
        }
    }
}

impl From<AcdError> for CliError {
    fn from(e: AcdError) -> Self {
        match e {
            AcdError::Numerical(m) => CliError::Numerical(m),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<acd_tensor::TensorError> for CliError {
    fn from(e: acd_tensor::TensorError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
