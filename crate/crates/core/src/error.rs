use thiserror::Error;

use crate::inference::Chain;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Coordinate dimensions disagree with what a kernel node expects.
    #[error("dimension mismatch in {node}: expected {expected}, found {found}")]
    DimensionMismatch {
        node: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("empty coordinate list passed to {0}")]
    EmptyInputs(&'static str),

    #[error("invalid hyperparameter {name}: {reason}")]
    InvalidHyperparameter { name: String, reason: String },

    /// Cholesky failed even after the jitter ladder was exhausted.
    #[error("covariance not positive definite after jitter {jitter:e} (hyperparameters {hyperparameters:?})")]
    Factorization {
        hyperparameters: Vec<f64>,
        jitter: f64,
    },

    #[error("every optimizer start failed to factorize the covariance")]
    FitFailed,

    #[error("model {model} failed at theta={theta:?}, x={x:?}: {reason}")]
    Model {
        model: String,
        theta: Vec<f64>,
        x: Vec<f64>,
        reason: String,
    },

    #[error("invalid prior for {name}: {reason}")]
    InvalidPrior { name: String, reason: String },

    #[error("initial state {0:?} has zero posterior density")]
    InitOutsideSupport(Vec<f64>),

    #[error("invalid sampler settings: {0}")]
    Sampler(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("chain {chain} aborted: {source}")]
    ChainAborted {
        chain: usize,
        partial: Vec<Chain>,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Dataset(_)
                | Error::InvalidPrior { .. }
                | Error::InvalidHyperparameter { .. }
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Sampler(_)
        )
    }
}
