use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a structural invariant. `field` names the violated piece.
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    /// A fixed-point iteration hit its iteration budget.
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Tables, grids, or environments whose dimensions disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("delta must lie in (0, 1), got {0}")]
    DeltaDomain(f64),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
