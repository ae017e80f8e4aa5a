use coupling_core::Error as CoreError;
use coupling_lab::LabError;
use thiserror::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CORRUPT_CHECKPOINT: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0} output file(s) failed validation")]
    Invalid(usize),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Lab(#[from] LabError),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn core_code(e: &CoreError) -> i32 {
    match e {
        CoreError::CorruptCheckpoint { .. } => EXIT_CORRUPT_CHECKPOINT,
        CoreError::InvalidInput(_)
        | CoreError::InvalidK { .. }
        | CoreError::InvalidConfig(_)
        | CoreError::UnknownToken { .. }
        | CoreError::SequenceTooLong { .. }
        | CoreError::EmptyPrompt
        | CoreError::InvalidConnection { .. }
        | CoreError::IncompleteInput(_)
        | CoreError::InsufficientData(_)
        | CoreError::Io { .. } => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Invalid(_) => EXIT_FAILURE,
            CliError::Core(e) => core_code(e),
            CliError::Lab(LabError::TrainingDiverged { .. }) => EXIT_DIVERGED,
            CliError::Lab(LabError::InvalidTask(_) | LabError::InvalidRun(_) | LabError::InvalidBasis(_)) => {
                EXIT_CONFIG
            }
            CliError::Lab(LabError::Core(e)) => core_code(e),
        }
    }
}

pub fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}
