use thiserror::Error;

/// Errors raised by kernels, samplers and estimators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("{what} of size {size} exceeds the cap of {cap}")]
    Size {
        what: &'static str,
        size: usize,
        cap: usize,
    },

    #[error("matrix is not positive semidefinite: factorization failed at pivot {pivot} after jitter {jitter:e}")]
    NotPositiveDefinite { pivot: usize, jitter: f64 },

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("lambda grid extends beyond resolvable probabilities at lambda = {lambda} (M = {replicas}); pass force to override")]
    UnresolvableGrid { lambda: f64, replicas: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
