use thiserror::Error;

pub type Result<T> = std::result::Result<T, FedError>;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate weights: all client sample counts are zero")]
    DegenerateWeights,
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("mask error: {0}")]
    Mask(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("ROC AUC undefined: trace contains a single class")]
    UndefinedAuc,
    #[error("wire format error: {0}")]
    Wire(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FedError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        FedError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        FedError::Config(msg.into())
    }
}
