use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical overflow: {0}")]
    Overflow(String),
    #[error("calibration did not converge after {iterations} iterations (bracket [{lo}, {hi}])")]
    NonConvergence { iterations: usize, lo: f64, hi: f64 },
    #[error("privacy budget unreachable: epsilon {epsilon} not met even at sigma^2 = {sigma_sq}")]
    UnreachableBudget { epsilon: f64, sigma_sq: f64 },
    #[error("mismatched delta across calibrations: {0} vs {1}")]
    MismatchedDelta(f64, f64),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("constraint violated: {0}")]
    Constraint(String),
    #[error("privacy plumbing violated: {0}")]
    Plumbing(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("data format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
