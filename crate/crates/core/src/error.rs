use thiserror::Error;

use crate::equilibrium::EquilibriumResult;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value from coefficient `{name}` at {location}")]
    NonFiniteCoefficient { name: String, location: String },

    #[error("coefficient `{name}` reached {value:.6e}, declared bound is {bound:.6e}")]
    BoundViolation { name: String, value: f64, bound: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("time grid is incompatible: {0}")]
    IncompatibleGrid(String),

    #[error("ensemble carries no common-noise paths")]
    MissingCommonNoise,

    #[error("measures live on different grids: {0}")]
    GridMismatch(String),

    #[error("covariance target is outside the diffusion hull (distance {gap:.3e})")]
    InfeasibleSigma { gap: f64 },

    #[error("explicit scheme violates CFL: dt * (|mu|/dx + s2/dx^2) = {ratio:.4} > 1")]
    CflViolation { ratio: f64 },

    #[error("space grid too small: {0}")]
    GridTooSmall(String),

    #[error("normal equations are singular at step {step}")]
    SingularRegression { step: usize },

    #[error("bucket {code} holds {count} particles, below the minimum {min}")]
    BucketStarvation { code: String, count: usize, min: usize },

    #[error("fixed point not reached: best residual {best_residual:.4e}")]
    NotConverged {
        best_residual: f64,
        partial: Box<EquilibriumResult>,
    },

    #[error("stiffness failure: step-halving error {estimate:.3e} exceeds {limit:.1e}")]
    StiffnessFailure { estimate: f64, limit: f64 },

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("unknown subcommand `{0}`")]
    UnknownSubcommand(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
