use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("parameter set does not match {family} with K={k}: {reason}")]
    DimensionMismatch {
        family: String,
        k: usize,
        reason: String,
    },

    #[error("mediator value {value} outside the support: {reason}")]
    Support { value: f64, reason: &'static str },

    #[error("quadrature did not converge (estimate {estimate:e}, error {error:e} after {intervals} intervals)")]
    Quadrature {
        estimate: f64,
        error: f64,
        intervals: usize,
    },

    #[error("record {index} has zero likelihood under every latent class")]
    ZeroLikelihood { index: usize },

    #[error("M-step found no ascent direction (gradient max-norm {grad_norm:e})")]
    NoAscent { grad_norm: f64 },

    #[error("all {0} EM starts failed to produce a finite log-likelihood")]
    AllStartsFailed(usize),

    #[error("no candidate model converged to a non-degenerate fit")]
    NoCandidate,

    #[error("non-finite Hessian entry at ({0}, {1})")]
    NonFiniteHessian(usize, usize),

    #[error("unknown design '{0}'")]
    UnknownDesign(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
