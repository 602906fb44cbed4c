use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ver_model::ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(AnalysisError::Contract(msg.into()))
}
