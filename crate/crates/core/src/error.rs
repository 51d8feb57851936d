use thiserror::Error;

/// Errors produced by the kernel, regularizer, solver and Bayes routines.
#[derive(Debug, Error)]
pub enum MklError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("regularizer side mismatch: expected {expected}, got {got}")]
    WrongSide { expected: &'static str, got: &'static str },

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("objective increased by {increase:.3e} at outer iteration {iteration}")]
    Oscillation { iteration: usize, increase: f64 },

    #[error("inner problem unbounded on the grid: {0}")]
    Unbounded(String),

    #[error("vector outside the range of the combined Gram matrix (residual {0:.3e})")]
    OutOfRange(f64),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MklError {
    /// True for errors that come from the numerics rather than from bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MklError::NotPositiveDefinite(_)
                | MklError::Singular(_)
                | MklError::NoConvergence { .. }
                | MklError::Oscillation { .. }
                | MklError::Unbounded(_)
                | MklError::OutOfRange(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, MklError>;
