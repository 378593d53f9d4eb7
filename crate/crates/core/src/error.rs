use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension { expected: usize, got: usize, context: &'static str },

    #[error("simulation produced a non-finite state in interval {interval}")]
    Simulation { interval: usize },

    #[error("replication {replication}: {source}")]
    Replication {
        replication: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite contrast value at increment {index}")]
    Evaluation { index: usize },

    #[error("quadrature did not converge: achieved error {achieved:e} vs tolerance {tolerance:e}")]
    Quadrature { achieved: f64, tolerance: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed input: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name: name.into(), reason: reason.into() }
    }

    pub(crate) fn in_replication(self, replication: usize) -> Self {
        Error::Replication { replication, source: Box::new(self) }
    }
}
