use thiserror::Error;

pub type Result<T, E = RepairError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RepairError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("environment construction failed: {0}")]
    Construction(String),

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("unknown pair id {0}")]
    UnknownPair(u64),

    #[error("pair {0} is already labeled")]
    AlreadyLabeled(u64),

    #[error("label {0} is not one of 0, 0.5, 1")]
    InvalidLabel(f64),

    #[error("timed out waiting for {0}")]
    Timeout(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl RepairError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        RepairError::InvalidInput(msg.into())
    }
}
