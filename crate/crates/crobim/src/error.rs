use thiserror::Error;

#[derive(Debug, Error)]
pub enum CrobimError {
    #[error("shape error in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("numerical error in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error in record {record}: {detail}")]
    Data { record: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CrobimError>;

impl CrobimError {
    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        CrobimError::Shape {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        CrobimError::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }
}

/// Reject non-finite values before they poison a softmax or a loss.
pub fn ensure_finite(values: &ndarray::ArrayD<f64>, context: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CrobimError::numerical(context, "non-finite values"))
    }
}
