use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("no compatible stack")]
    NoCompatibleStack,
    #[error(transparent)]
    Chunnel(chunnel::Error),
    /// A correctness check failed; never silently ignored.
    #[error("violation: {0}")]
    Violation(String),
}

impl From<chunnel::Error> for HarnessError {
    fn from(e: chunnel::Error) -> Self {
        match e {
            chunnel::Error::NoCompatibleStack => HarnessError::NoCompatibleStack,
            e => HarnessError::Chunnel(e),
        }
    }
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::NoCompatibleStack => 2,
            HarnessError::Violation(_) => 3,
            HarnessError::Config(_) => 64,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
