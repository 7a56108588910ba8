use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("numeric overflow at time step {step}: {detail}")]
    NumericOverflow { step: usize, detail: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("unsupported config: {0}")]
    UnsupportedConfig(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("store is locked by another writer: {0}")]
    Locked(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code for this error class: 2 invalid input, 3 config
    /// mismatch, 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::NotFound(_) | Error::Format(_) | Error::Json(_) => 2,
            Error::ConfigMismatch(_) | Error::UnsupportedConfig(_) => 3,
            Error::NumericOverflow { .. } | Error::TrainingDiverged { .. } => 4,
            Error::Locked(_) | Error::Io(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
