use thiserror::Error;

/// Errors surfaced by field construction, flux evaluation, and the CLI.
#[derive(Debug, Error)]
pub enum FluxError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("field is not Hermitian-symmetric at k = {key:?}: {detail}")]
    NotHermitian { key: Vec<i32>, detail: String },

    #[error("field is not divergence-free at k = {key:?} (|k.u| = {violation:.3e})")]
    NotDivergenceFree { key: Vec<i32>, violation: f64 },

    #[error("pair budget exceeded: {needed} pairs requested, cap is {cap}")]
    PairBudgetExceeded { needed: u128, cap: u128 },

    #[error("grid budget exceeded: {needed} points requested, cap is {cap}")]
    GridBudgetExceeded { needed: u128, cap: u128 },

    #[error("invalid parameter {name}: {detail}")]
    InvalidParameter { name: String, detail: String },

    #[error("block sets collide: {detail}")]
    BlockCollision { detail: String },

    #[error("quadrature failed to reach tolerance {tol:.3e} (best error estimate {best:.3e})")]
    QuadratureFailure { tol: f64, best: f64 },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FluxError>;
