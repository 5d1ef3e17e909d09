use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(
        "degenerate transport cost: exp(-lambda * M) underflows for {0}; rescale the embeddings or lower lambda"
    )]
    DegenerateCost(String),

    #[error("exact transport oracle supports at most {max} points per side with equal sizes, got {n1} and {n0}")]
    OracleScope { max: usize, n1: usize, n0: usize },

    #[error("positivity violated: {0}")]
    PositivityViolation(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingDiverged { epoch: usize, reason: String },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("beta selection failed: every candidate diverged")]
    SelectionFailed,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
