//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("state outside the domain: {coords:?}")]
    OutOfDomain { coords: Vec<f64> },

    #[error("invalid box: lo {lo} > hi {hi} at dimension {dim}")]
    InvalidBox { dim: usize, lo: f64, hi: f64 },

    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),

    #[error("Gram factorization failed; raise the noise variance to at least {suggested_noise:e}")]
    GramFactorization { suggested_noise: f64 },

    #[error("activation-pattern enumeration too large: {count} candidates exceed the cap {cap}")]
    PatternBlowup { count: u64, cap: u64 },

    #[error("weight projection infeasible: {0}")]
    ProjectionInfeasible(String),

    #[error("training diverged at episode {episode}: {detail}")]
    TrainingDiverged { episode: usize, detail: String },

    #[error("controller evaluation failed at step {step}: {detail}")]
    ControllerFailure { step: usize, detail: String },

    #[error("no donor policy: the store is empty")]
    NoDonorPolicy,

    #[error("missing policy for transition {key}")]
    MissingPolicy { key: String },

    #[error("oracle instance too large: {0}")]
    OracleInfeasible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("artifact was built from config {artifact_hash} but the current config hashes to {config_hash}")]
    HashMismatch {
        artifact_hash: String,
        config_hash: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;
