use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate variance: upsilon1 = {upsilon1}, upsilon2 = {upsilon2}")]
    DegenerateVariance { upsilon1: f64, upsilon2: f64 },

    #[error("moment of order {order} diverges (a = {a}, d = {d})")]
    DivergentMoment { order: usize, a: f64, d: f64 },

    #[error("divergent integral: {0}")]
    DivergentIntegral(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("x = {0} lies outside the configuration interval [0, 1]")]
    OutOfDomain(f64),

    #[error("bin {bin} holds {count} agents, at least {min} required")]
    SparseBin { bin: usize, count: usize, min: usize },

    #[error("time step {dt:e} exceeds the stability limit {dt_max:e}")]
    CflViolation { dt: f64, dt_max: f64 },

    #[error("density moments {found:?} differ from the requested {expected:?}")]
    MomentMismatch { expected: [f64; 2], found: [f64; 2] },

    #[error("insufficient support: {0}")]
    InsufficientSupport(String),

    #[error("incompatible domains: {0}")]
    IncompatibleDomain(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid scenario:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Validation and parse problems are the caller's fault; everything else
    /// is a runtime failure of a solver.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Parse(_) | Error::InvalidParameter(_))
    }
}
