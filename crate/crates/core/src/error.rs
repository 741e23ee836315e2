use thiserror::Error;

/// Errors produced by the forecasting library.
#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    TrainingDivergence {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("unsupported distribution family: {0}")]
    UnsupportedFamily(String),

    #[error("unsupported checkpoint format version {0}")]
    CheckpointVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

pub type Result<T, E = ForecastError> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ForecastError::InvalidArgument(msg.into()))
}
