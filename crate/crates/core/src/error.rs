use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Iteration budget exhausted; carries the Rayleigh-quotient (or energy) trace.
    #[error("diverged after {iterations} iterations: {reason}")]
    Diverged {
        iterations: usize,
        reason: String,
        trace: Vec<f64>,
    },

    #[error("coercivity failure: lambda1 = {lambda1:e} <= 0, the energy is not coercive")]
    CoercivityFailure { lambda1: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("inconclusive: {0}")]
    Inconclusive(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
