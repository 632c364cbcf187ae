use freekd_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Check(_) => 4,
            CliError::Internal(_) => 1,
        }
    }

    pub fn output(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Internal(format!("cannot write {}: {e}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        if e.is_data_error() {
            CliError::Data(e.to_string())
        } else if matches!(e, CoreError::Contract(_)) {
            CliError::Config(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}
