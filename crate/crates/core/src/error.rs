use thiserror::Error;

/// Errors raised by the laboratory. Each variant maps onto a CLI exit code.
#[derive(Debug, Error)]
pub enum LabError {
    /// Invalid input: bad configuration, invalid measure, wrong regime.
    #[error("validation error at `{path}`: {message}")]
    Validation { path: String, message: String },

    /// A numerical quality check failed (flow monotonicity, PSD, clamping).
    #[error("numeric quality error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        LabError::Numeric(message.into())
    }

    /// Process exit code: 2 validation, 3 numeric quality, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Validation { .. } => 2,
            LabError::Numeric(_) => 3,
            LabError::Io(_) | LabError::Json(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
