use thiserror::Error;

/// Errors raised by the estimation and reconstruction pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("no curves")]
    NoCurves,

    #[error("curve {0} has fewer than two distinct abscissae")]
    DegenerateCurve(String),

    #[error("observation u={u} of curve {curve} lies outside the domain [{a}, {b}]")]
    OutsideDomain { curve: String, u: f64, a: f64, b: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient local data at u={u}: {effective} observations with nonzero weight")]
    InsufficientLocalData { u: f64, effective: usize },

    #[error("mean not estimable at u={u}")]
    MeanNotEstimable { u: f64 },

    #[error("noise variance not identifiable: no estimable interior diagonal")]
    NoiseNotIdentifiable,

    #[error("covariance not estimable on the requested subdomain")]
    CovarianceNotEstimable,

    #[error("covariance is not estimable on the whole domain; use the iterative reconstruction")]
    FullDomainNotEstimable,

    #[error("degenerate covariance: no positive eigenvalues")]
    DegenerateCovariance,

    #[error("requested K={requested} components but only {available} are available")]
    TooManyComponents { requested: usize, available: usize },

    #[error("ill-conditioned score system (condition estimate {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("no complete curves for GCV")]
    NoCompleteCurves,

    #[error("no admissible candidate for GCV")]
    NoGcvCandidate,

    #[error("ridge parameter must be positive")]
    NonPositiveRidge,

    #[error("{method} failed on {failed} of {total} reconstructions: {first}")]
    StudyAborted {
        method: String,
        failed: usize,
        total: usize,
        first: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
