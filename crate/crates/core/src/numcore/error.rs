use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("cholesky failed: non-positive pivot at row {pivot} after jitter {jitter:e}")]
    Decomposition { pivot: usize, jitter: f64 },

    #[error("singular triangular matrix: zero diagonal at row {index}")]
    Singular { index: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, NumError>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NumError::Dimension {
        op,
        detail: detail.into(),
    })
}
