use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical procedure did not reach its tolerance.
    #[error("numerical failure in {routine}: {detail}")]
    Numeric { routine: &'static str, detail: String },

    /// A user-supplied utility or model violates a structural requirement.
    #[error("specification error: {0}")]
    Spec(String),

    /// The requested estimator cannot be used with this configuration.
    #[error("unsupported estimator: {0}")]
    Unsupported(String),

    /// A configuration failed validation before any computation started.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numeric(routine: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            routine,
            detail: detail.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
