use std::path::PathBuf;

use thiserror::Error;

use crate::distillation::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration invariant does not hold.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor geometry does not match what the consumer expects.
    #[error("shape error: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// A function argument is outside its domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Correlation is undefined because one input is constant.
    #[error("undefined correlation: {0} is constant")]
    UndefinedCorrelation(&'static str),

    #[error("training diverged at step {step}: {breakdown:?}")]
    Divergence {
        step: usize,
        breakdown: LossBreakdown,
    },

    #[error(
        "gradient check failed: max relative error {max_rel_error:.3e} exceeds {tolerance:.1e}"
    )]
    GradCheck { max_rel_error: f64, tolerance: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures the CLI reports with the numerical-failure exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::GradCheck { .. })
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
