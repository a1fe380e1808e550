use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto CLI exit codes: config/usage problems exit 1, numeric
/// failures exit 2, IO and container-format problems exit 3.
#[derive(Debug, Error)]
pub enum EagError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("stage mismatch: expected `{expected}` checkpoint, found `{found}`")]
    StageMismatch { expected: String, found: String },
}

impl EagError {
    pub fn config(msg: impl Into<String>) -> Self {
        EagError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        EagError::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        EagError::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        EagError::Format(msg.into())
    }

    /// Process exit code for the CLI: 1 usage/config, 2 numeric, 3 IO/format.
    pub fn exit_code(&self) -> i32 {
        match self {
            EagError::Config(_) | EagError::Shape(_) => 1,
            EagError::Numeric(_) => 2,
            EagError::Io(_) | EagError::Format(_) | EagError::StageMismatch { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, EagError>;
