use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no lower boundary models supplied")]
    EmptyUnion,

    #[error("insufficient sample: {available} effective observations, need more than {required}")]
    InsufficientSample { available: usize, required: usize },

    #[error("non-finite log-likelihood at parameter point {point:?}")]
    Evaluation { point: Vec<f64> },

    #[error("model space has {count} candidates, above the cap of {cap}")]
    UniverseTooLarge { count: u128, cap: u128 },

    #[error("full model fit failed: {0}")]
    FullModelFailed(String),

    #[error("likelihood ratio {lambda} is negative: nested fit beats the full-model optimum")]
    InconsistentOptimum { lambda: f64 },

    #[error("{inner} is not nested in {outer}")]
    NotNested { inner: String, outer: String },

    #[error("non-stationary process: {0}")]
    NonStationary(String),

    #[error("correlation {rho} infeasible for {s} predictors: must lie in ({lower}, 1)")]
    InfeasibleCorrelation { rho: f64, s: usize, lower: f64 },
}
