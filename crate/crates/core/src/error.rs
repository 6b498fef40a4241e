use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// A weighted centroid was requested over cells whose values sum to zero.
    #[error("zero-mass region: {0}")]
    ZeroMass(String),

    /// Cosine similarity is undefined when one operand is the zero vector.
    #[error("zero vector in cosine similarity: {0}")]
    ZeroVector(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
