use thiserror::Error;

/// Errors produced by model construction, propagation and acquisition.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point list")]
    EmptyPoints,

    #[error("observation set invalid: {0}")]
    InvalidObservations(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariance matrix is ill-conditioned: factorization failed after jitter up to {max_jitter:e}")]
    IllConditioned { max_jitter: f64 },

    #[error("covariance is not symmetric: max asymmetry {asymmetry:e} exceeds tolerance")]
    NonSymmetricCovariance { asymmetry: f64 },

    #[error("covariance is not positive semidefinite: eigenvalue {eigenvalue:e} below tolerance")]
    NotPositiveSemiDefinite { eigenvalue: f64 },

    #[error("spectrum is identically zero; cannot truncate by variance")]
    ZeroSpectrum,

    #[error("conditional model has zero stochastic dimension: field is fully determined by the data")]
    FullyDetermined,

    #[error("diffusion coefficient must be strictly positive (node {node} has k = {value:e})")]
    NonPositiveCoefficient { node: usize, value: f64 },

    #[error("linear solve did not reach the residual tolerance: relative residual {residual:e}")]
    SolverResidual { residual: f64 },

    #[error("LAPACK routine {routine} failed with info = {info}")]
    Lapack { routine: &'static str, info: i32 },

    #[error("no admissible candidate locations")]
    NoCandidates,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps the error with a stage label (e.g. a realization or node index).
    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
