use thiserror::Error;

pub type Result<T, E = PgbError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PgbError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("archive format error: {0}")]
    Format(String),

    #[error("budget infeasible: attention pruning keeps {retained} parameters, {overshoot:.1} over the budget of {budget:.1}")]
    BudgetInfeasible {
        budget: f64,
        retained: u64,
        overshoot: f64,
    },

    #[error("instance too large for exhaustive search: {0} candidate plans")]
    TooLarge(u128),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
