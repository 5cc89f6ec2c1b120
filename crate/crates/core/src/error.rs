use thiserror::Error;

use crate::perturbations::DistributionKind;

#[derive(Debug, Error)]
pub enum SpsaError {
    #[error("{op} is undefined for {kind}: it has a probability mass function")]
    KindMismatch { op: &'static str, kind: DistributionKind },

    #[error("probability {0} lies outside [0, 1]")]
    ProbabilityDomain(f64),

    #[error("perturbation component {index} is zero; the gradient estimate divides by it")]
    ZeroPerturbation { index: usize },

    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("invalid parameter `{name}` = {value}: {constraint}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },

    #[error("loss `{0}` is not quadratic; the closed form requires a vanishing Taylor remainder")]
    NotQuadratic(String),

    #[error("unknown loss `{name}` (registered: {known})")]
    UnknownLoss { name: String, known: String },

    #[error("`{0}` is not a valid SPSA perturbation distribution (valid: bernoulli, segmented_uniform)")]
    UnknownDistribution(String),

    #[error("theta_star is not a stationary point of `{loss}`: |grad| = {norm:e}")]
    NotStationary { loss: String, norm: f64 },

    #[error("the conservative condition needs a third-derivative bound M")]
    MissingThirdDerivativeBound,

    #[error("replicate {replicate} diverged under {distribution} at iteration {iteration}")]
    Diverged {
        replicate: u64,
        distribution: DistributionKind,
        iteration: usize,
    },

    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),

    #[error("config error: {0}")]
    Config(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SpsaError>;
