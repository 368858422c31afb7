use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("ODE state became non-finite at step {step}")]
    Diverged { step: usize },

    #[error("training diverged: non-finite gradient in {0}")]
    GradientDiverged(String),

    #[error("{kind} format version mismatch: expected v{expected}, found v{found}")]
    VersionMismatch {
        kind: String,
        expected: u32,
        found: u32,
    },

    #[error("malformed {kind} file: {reason}")]
    Format { kind: String, reason: String },

    #[error("prosody provider failed: {0}")]
    Provider(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
