use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation; exit code 1.
    #[error("{0}")]
    Usage(String),
    /// Unreadable, invalid or inconsistent data; exit code 2.
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl From<bevnav_core::Error> for CliError {
    fn from(e: bevnav_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<bevnav_model::ModelError> for CliError {
    fn from(e: bevnav_model::ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
