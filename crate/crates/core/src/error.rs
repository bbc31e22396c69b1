use thiserror::Error;

/// Errors produced by the aggregation library and the verification harness.
#[derive(Debug, Error)]
pub enum LpfError {
    #[error("cannot normalize: {0}")]
    Normalization(String),

    #[error("support violation: {0}")]
    Support(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("all weights are zero")]
    DegenerateWeights,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("quadrature oracle supports at most {max} latent dimensions, got {got}")]
    UnsupportedDimension { max: usize, got: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("singular least-squares design: {0}")]
    SingularFit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = LpfError> = std::result::Result<T, E>;
