use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("truncation rank {k} outside 1..={max}")]
    InvalidK { k: usize, max: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("point cloud has zero variance")]
    DegenerateVariance,

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("non-finite value in block {layer}")]
    NumericalOverflow { layer: usize },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("invalid connection (layer {layer}, t_in {t_in}, t_out {t_out}): {reason}")]
    InvalidConnection {
        layer: usize,
        t_in: usize,
        t_out: usize,
        reason: String,
    },

    #[error("degenerate spectrum: top-K singular values sum to {0:e}")]
    DegenerateSpectrum(f64),

    #[error("missing inputs: {}", .0.join(", "))]
    IncompleteInput(Vec<String>),

    #[error("trajectory has fewer than two distinct points")]
    DegenerateTrajectory,

    #[error("zero norm at layer {0}")]
    DegenerateNorm(usize),

    #[error("schema violation in {file}: {reason}")]
    Schema { file: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptCheckpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
