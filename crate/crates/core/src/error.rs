use thiserror::Error;

/// Errors raised by the analysis, operator and simulation layers.
///
/// Instability is never an error: an unstable forward block or a loop gain
/// with spectral radius above one is reported through a verdict.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("time {t} is not on the sampling grid (dt = {dt})")]
    OffGrid { t: f64, dt: f64 },

    #[error("impulse samples: {0}")]
    BadSamples(String),

    #[error("at least {needed} samples required, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("{what} is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { what: &'static str, asymmetry: f64 },

    #[error("{what} is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { what: &'static str, min_eigenvalue: f64 },

    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),

    #[error("matrix is not Hurwitz (spectral abscissa {abscissa:e})")]
    NotHurwitz { abscissa: f64 },

    #[error("Lyapunov operator is singular")]
    SingularSystem,

    #[error("bad quadrature grid: horizon {horizon}, dt {dt}")]
    BadQuadrature { horizon: f64, dt: f64 },

    #[error("the Stratonovich loop gain needs a state-space realization")]
    StratonovichNeedsRealization,

    #[error("{0} needs a state-space realization")]
    RealizationRequired(&'static str),

    #[error("Kronecker sum is singular")]
    SingularKroneckerSum,

    #[error("Kronecker operator too large: n^2 = {0} exceeds 256")]
    KroneckerTooLarge(usize),

    #[error("system is not mean-square stable (rho = {rho}, h2 finite = {h2_finite})")]
    NotMss { rho: f64, h2_finite: bool },

    #[error("fixed point (I - L) U = W is numerically singular")]
    SingularFixedPoint,

    #[error("bad time grid: horizon {horizon}, dt {dt}")]
    BadGrid { horizon: f64, dt: f64 },

    #[error("implicit midpoint iteration did not converge at step {step}")]
    MidpointNoConvergence { step: usize },

    #[error("at least {needed} paths required, got {got}")]
    InsufficientPaths { needed: usize, got: usize },

    #[error("invalid simulation config: {0}")]
    BadConfig(String),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("{field}: {message}")]
    SchemaViolation { field: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
