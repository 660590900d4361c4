use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient; run backward before stepping")]
    MissingGradient(String),

    #[error("variance map has negative entry {value} at flat index {index}")]
    NegativeVariance { index: usize, value: f64 },

    #[error("training diverged at {stage}: loss is {loss}")]
    Diverged { stage: String, loss: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no domain shift: source and target specs are identical")]
    IdenticalDomains,

    #[error("unmatched file `{}` (no partner with the same basename)", .0.display())]
    UnmatchedFile(PathBuf),

    #[error("label {value} out of range (num classes {num_classes}) at pixel ({x}, {y}) in {}", path.display())]
    LabelOutOfRange { path: PathBuf, x: u32, y: u32, value: u8, num_classes: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("image error on {}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by the environment or configuration rather than
    /// by a failed computation (CLI maps these to exit code 2).
    pub fn is_io_or_config(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Image { .. }
                | Error::Config(_)
                | Error::Json(_)
                | Error::Checkpoint(_)
                | Error::UnmatchedFile(_)
                | Error::LabelOutOfRange { .. }
        )
    }
}
