use thiserror::Error;

use crate::trainer::MetricRecord;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum CapoError {
    /// A precondition on indices, shapes or parameter ranges was violated.
    #[error("usage error: {0}")]
    Usage(String),

    /// A config or environment file could not be parsed.
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    /// Training produced a NaN or infinite gradient.
    #[error("non-finite gradient at step {step}")]
    NonFinite {
        step: usize,
        /// Metrics of the offending step, as far as they could be computed.
        record: Box<MetricRecord>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CapoError {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        CapoError::Usage(msg.into())
    }

    pub(crate) fn config(line: usize, msg: impl Into<String>) -> Self {
        CapoError::Config {
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = CapoError> = std::result::Result<T, E>;
