use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An iterative solver ran out of iterations. `residuals` holds the
    /// relative residual after each iteration.
    #[error("{solver} did not converge in {iterations} iterations (last relative residual {last:.3e})", last = residuals.last().copied().unwrap_or(f64::NAN))]
    SolverFailure {
        solver: &'static str,
        iterations: usize,
        residuals: Vec<f64>,
    },

    #[error("follower operator is not coercive: sampled Rayleigh quotient {quotient:.3e} <= 0 with beta = ({beta1}, {beta2}); increase beta")]
    CoercivityViolation {
        beta1: f64,
        beta2: f64,
        quotient: f64,
    },

    #[error("coupled fixed-point iteration diverged after {iterations} iterations (contraction estimate {contraction:.3e}, damping {damping})")]
    CouplingDivergence {
        iterations: usize,
        contraction: f64,
        damping: f64,
    },

    #[error("weight evaluated at singular time t = {0}")]
    Pole(f64),

    #[error("dense oracle refused: {size} unknowns exceeds the guard of {limit}")]
    SizeGuard { size: usize, limit: usize },
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
