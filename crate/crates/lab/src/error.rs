use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid training run: {0}")]
    InvalidRun(String),
    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f64 },
    #[error("basis is not orthogonal: ‖UᵀU − I‖_F = {0:e}")]
    InvalidBasis(f64),
    #[error(transparent)]
    Core(#[from] coupling_core::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
