use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoxqError>;

#[derive(Debug, Error)]
pub enum CoxqError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A forward pass or update produced NaN/Inf. Training has diverged.
    #[error("numeric divergence: {0}")]
    NumericDivergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metrics parse error at line {line}: {message}")]
    Metrics { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoxqError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CoxqError::InvalidInput(msg.into())
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(CoxqError::DimensionMismatch { expected, actual })
    }
}
