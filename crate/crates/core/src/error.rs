use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] aime_diffcore::Error),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("dataset format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("dataset payload truncated: {0}")]
    Truncated(String),

    #[error("dataset hash mismatch: manifest says {expected}, content hashes to {found}")]
    HashMismatch { expected: String, found: String },

    #[error("frozen parameters changed during {0}")]
    FrozenViolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short code, used in reports and exit diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Numeric(_) => "numeric",
            Error::Invalid(_) => "invalid",
            Error::NonFinite { .. } => "non_finite",
            Error::Numerical(_) => "numerical",
            Error::Version { .. } => "version_mismatch",
            Error::Truncated(_) => "truncated",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::FrozenViolation(_) => "frozen_violation",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

pub type Result<T> = std::result::Result<T, Error>;
