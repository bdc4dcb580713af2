use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mode index {0}: modes are numbered from 1")]
    InvalidMode(i64),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("riccati integration failed at t = {t}: {reason}")]
    Riccati { t: f64, reason: String },

    #[error("control synthesis failed: {0}")]
    Synthesis(String),

    #[error("source block {block} failed: {reason}")]
    Block { block: usize, reason: String },

    #[error("unobservable band: {0}")]
    Unobservable(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by invalid user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. } | Error::InvalidMode(_) | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
