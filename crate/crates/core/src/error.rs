use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors disagree along an axis, or a tensor has the wrong rank.
    #[error("dimension mismatch on axis {axis}: {detail}")]
    Dimension { axis: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("evaluation produced a non-finite value: {0}")]
    NonFinite(String),

    #[error("numeric failure at step {step}: loss={loss}, lr={lr}, grad_norm={grad_norm}")]
    Diverged {
        step: u64,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(axis: usize, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis,
            detail: detail.into(),
        }
    }
}
