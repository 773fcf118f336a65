use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A block was handed tensors that violate its shape/level contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model or training configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Degenerate geometry (non-positive box extent etc.).
    #[error("domain error: {0}")]
    Domain(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
