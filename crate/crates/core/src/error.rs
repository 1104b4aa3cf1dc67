use thiserror::Error;

/// Errors raised by the coefficient solvers, propagators and samplers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("frequency {omega} outside the domain of the spectral density ({reason})")]
    Domain { omega: f64, reason: String },

    #[error("frequency {omega} outside the tabulated range [{lo}, {hi}]")]
    Extrapolation { omega: f64, lo: f64, hi: f64 },

    #[error("frequency integral diverges: {0}")]
    Divergent(String),

    #[error("quadrature did not reach tolerance {tolerance:e} (estimated error {estimate:e})")]
    QuadratureTolerance { tolerance: f64, estimate: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("singular linear system at final-time index {index}")]
    Singular { index: usize },

    #[error("degenerate boundary-value problem at t = {t}: {reason}")]
    Degenerate { t: f64, reason: String },

    #[error("coefficient set is invalid on the interval starting at t = {t}")]
    MaskedInterval { t: f64 },

    #[error("trajectory with seed {seed} diverged at step {step}")]
    TrajectoryRejected { seed: u64, step: usize },

    #[error("need at least {needed} trajectories, got {got}")]
    Arity { needed: usize, got: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
