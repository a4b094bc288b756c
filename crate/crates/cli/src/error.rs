use strokerig_core::ParseError;
use strokerig_model::ModelError;

/// Failure of a subcommand, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input or configuration; exit code 2.
    #[error("{0}")]
    Validation(String),
    /// Anything else; exit code 1.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Internal(_) => 1,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn internal(msg: impl std::fmt::Display) -> Self {
        CliError::Internal(msg.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Invalid(_) | ModelError::Graph(_) | ModelError::Config(_) | ModelError::Checkpoint(_) => {
                CliError::Validation(e.to_string())
            }
            ModelError::Shape(_) | ModelError::Diverged(_) | ModelError::Io(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<ParseError> for CliError {
    fn from(e: ParseError) -> Self {
        CliError::Validation(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
