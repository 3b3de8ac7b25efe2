use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("time {time} is not aligned with grid step {dt}")]
    Alignment { time: f64, dt: f64 },

    #[error("time {time} outside available window [{min}, {max}]")]
    Range { time: f64, min: f64, max: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("lambda = {lambda} coincides with eigenvalue mu_{index}")]
    SpectralCollision { lambda: f64, index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid dichotomy: alpha = {alpha} must exceed beta = {beta}")]
    InvalidDichotomy { alpha: f64, beta: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(
        "fixed-point iteration did not converge after {iterations} iterations \
         (last delta {last_delta:e}, contraction estimate {contraction_est})"
    )]
    NonConvergence {
        iterations: usize,
        last_delta: f64,
        contraction_est: f64,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the user's configuration rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Parameter(_) | Error::DimensionMismatch { .. }
        )
    }
}
