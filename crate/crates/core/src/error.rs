use thiserror::Error;

/// Errors raised by volume ingestion, model fitting and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// The input file does not parse under its declared format.
    #[error("malformed input: {0}")]
    Format(String),

    /// A caller-supplied argument or data set violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numerical routine produced a non-finite or otherwise unusable value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// EM produced a non-finite log-likelihood. The trace up to the failure is kept.
    #[error("EM diverged after {} iterations", trace.len())]
    Diverged { trace: Vec<f64> },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Format(_) | Error::InvalidInput(_) | Error::Json(_)
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
