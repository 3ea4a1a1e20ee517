use sfuda_core::Error;

use crate::reproduce::StageError;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] Error),

    #[error(transparent)]
    Stage(#[from] StageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn core_exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericFailure { .. } => EXIT_NUMERIC,
        Error::InvalidParam(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) | CliError::Io(_) => EXIT_DATA,
            CliError::Core(e) => core_exit_code(e),
            CliError::Stage(s) => core_exit_code(&s.source),
        }
    }
}
