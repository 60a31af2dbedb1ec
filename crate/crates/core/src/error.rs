use thiserror::Error;

pub type Result<T, E = BapError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BapError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate input in {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("mask for foreground {fg_id} is empty after {mode}")]
    DegenerateMask { fg_id: u64, mode: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("tensor format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BapError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        BapError::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        BapError::DegenerateInput { op, detail: detail.into() }
    }
}
