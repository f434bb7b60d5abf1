use thiserror::Error;

/// Error categories for the whole pipeline. The CLI maps each variant to a
/// distinct nonzero exit code.
#[derive(Debug, Error)]
pub enum TsvError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TsvError>;

impl TsvError {
    /// Stable process exit code per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            TsvError::Dimension(_) => 2,
            TsvError::Contract(_) => 3,
            TsvError::Config(_) => 4,
            TsvError::Data(_) => 5,
            TsvError::Numeric(_) => 6,
            TsvError::Io(_) => 7,
            TsvError::Serde(_) => 8,
        }
    }
}
