use thiserror::Error;

/// Harness-level failure. `Usage` maps to exit code 2, everything else to 1.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ver_model::ModelError),
    #[error(transparent)]
    Core(#[from] ver_core::CoreError),
    #[error(transparent)]
    Analysis(#[from] ver_analysis::AnalysisError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub fn usage_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Usage(msg.into()))
}

pub fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Config(msg.into()))
}
