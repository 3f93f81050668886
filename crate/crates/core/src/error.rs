use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be >= 1")]
    InvalidShape(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("unknown variant {0:?} (expected ti, s, m, b or micro)")]
    InvalidVariant(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid fusion: {0}")]
    InvalidFusion(String),

    #[error("not a checkpoint: {0}")]
    Format(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),

    #[error("unsupported checkpoint version {0}")]
    Version(u16),

    #[error("checkpoint does not match its config: {0}")]
    Integrity(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    TrainingFailure { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Error::InvalidGeometry(msg.into())
    }
}
