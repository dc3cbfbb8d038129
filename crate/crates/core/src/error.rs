use thiserror::Error;

/// Errors raised anywhere in the simulator and optimizer.
#[derive(Debug, Error)]
pub enum SpdError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("training diverged at step {step}{}", block.map(|b| format!(" (block {b})")).unwrap_or_default())]
    Diverged { step: usize, block: Option<usize> },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SpdError {
    /// Short machine-readable category, used in structured CLI output.
    pub fn kind(&self) -> &'static str {
        match self {
            SpdError::Dimension(_) => "dimension",
            SpdError::Parameter(_) => "parameter",
            SpdError::Contract(_) => "contract",
            SpdError::Config(_) => "config",
            SpdError::Data(_) => "data",
            SpdError::Capacity(_) => "capacity",
            SpdError::NonFinite(_) => "non_finite",
            SpdError::Diverged { .. } => "diverged",
            SpdError::Format(_) => "format",
            SpdError::Io(_) | SpdError::File { .. } => "io",
            SpdError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, SpdError>;
