use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("evaluation failed at point {point:?}, action {action}: {reason}")]
    Evaluation {
        point: Vec<f64>,
        action: i64,
        reason: String,
    },

    #[error("singular power index {index}: {hint}")]
    SingularIndex { index: f64, hint: String },

    #[error("degenerate instance: {0}")]
    Degenerate(String),

    #[error("invalid record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("internal consistency violation: {0}")]
    Internal(String),

    #[error("harness error: {0}")]
    Harness(String),

    #[error("format error: {0}")]
    Format(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
