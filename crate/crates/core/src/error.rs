use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("empty loss: {0}")]
    EmptyLoss(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt dataset shard `{shard}`: {reason}")]
    CorruptDataset { shard: String, reason: String },

    #[error("version mismatch: {0}")]
    Version(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: u8, classes: usize },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("training diverged at step {step} (last good checkpoint: {last_checkpoint})")]
    Divergence { step: usize, last_checkpoint: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
