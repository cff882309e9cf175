use thiserror::Error;

#[derive(Debug, Error)]
pub enum CateForgeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("solver did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CateForgeError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CateForgeError::InvalidInput(msg.into())
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        CateForgeError::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CateForgeError>;
