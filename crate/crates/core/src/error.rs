use thiserror::Error;

use crate::gpr::SharedHyper;

pub type Result<T> = std::result::Result<T, SaberError>;

#[derive(Debug, Error)]
pub enum SaberError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular system: {0}")]
    Singular(String),

    /// Hyperparameter descent produced a non-finite objective; carries the
    /// last hyperparameters whose objective was finite.
    #[error("optimization diverged: {message}")]
    Divergence {
        message: String,
        last_stable: Option<SharedHyper>,
    },

    #[error("density is not positive at query point {0}")]
    UndefinedDensity(usize),

    #[error("unknown field `{0}`")]
    UnknownField(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SaberError {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        SaberError::DimensionMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SaberError::InvalidArgument(msg.into())
    }

    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        SaberError::NonFinite(what.into())
    }
}
