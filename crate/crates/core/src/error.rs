use thiserror::Error;

/// Errors raised during model construction, simulation and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("quadrature did not converge: {0}")]
    QuadratureNonConvergence(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("control mode mismatch: dataset is {dataset}, controls are {controls}")]
    ModeMismatch {
        dataset: &'static str,
        controls: &'static str,
    },

    #[error("scheme `{scheme}` is not applicable to model `{model}`")]
    SchemeMismatch {
        scheme: &'static str,
        model: &'static str,
    },

    #[error("batch too small: need at least {min}, got {got}")]
    BatchTooSmall { min: usize, got: usize },

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
