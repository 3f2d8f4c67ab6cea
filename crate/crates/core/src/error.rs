use thiserror::Error;

pub type Result<T, E = DroError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DroError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("weights are not on the simplex: {0}")]
    InvalidWeights(String),

    #[error("per-sample gradients are required but the batch has none")]
    MissingGradients,

    #[error("bisection for eta did not converge after {iters} iterations (bracket [{lo}, {hi}])")]
    NonConvergence { iters: usize, lo: f64, hi: f64 },

    #[error("{0} is not supported for this objective")]
    Unsupported(String),

    #[error("problem has no declared finite support")]
    InfiniteSupport,

    #[error("non-finite value encountered at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    #[error("dataset error at line {line}: {reason}")]
    Dataset { line: usize, reason: String },

    #[error("config error at {pointer}: {reason}")]
    Config { pointer: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DroError {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        DroError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
