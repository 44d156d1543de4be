use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("numeric failure at step {step}: {message}")]
    NumericFailure { step: usize, message: String },

    #[error("reversal drift at step {step}: max-abs deviation {magnitude:.3e} exceeds {tolerance:.1e}")]
    ReversalDrift {
        step: usize,
        magnitude: f64,
        tolerance: f64,
    },

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("conformality: {0}")]
    Conformality(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    /// True for errors caused by floating-point trouble rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NumericFailure { .. }
                | Error::ReversalDrift { .. }
                | Error::DegenerateTrajectory(_)
        )
    }
}
