use thiserror::Error;

use crate::ad::AdError;
use crate::flows::FlowError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Data { path: String, message: String },
    #[error("{0}")]
    Contract(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether a training step may skip the batch and carry on.
    pub fn is_decomposition(&self) -> bool {
        matches!(
            self,
            Error::Ad(AdError::Decomposition { .. }) | Error::Flow(FlowError::Ad(AdError::Decomposition { .. }))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
