use crate::shape::Shape;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensor ops, model construction and the I/O layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor dimension does not match what the operation requires.
    /// `axis` names the offending axis ("batch", "channels", "height", "width").
    #[error("{op}: {axis} mismatch, expected {expected}, got {got}")]
    DimMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {what} = {value} not divisible by {divisor}")]
    Indivisible {
        op: &'static str,
        what: &'static str,
        value: usize,
        divisor: usize,
    },

    #[error("{op}: kernel size {k} must be odd")]
    EvenKernel { op: &'static str, k: usize },

    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: Shape },

    #[error("{op}: non-finite value produced (NaN or Inf)")]
    NonFinite { op: &'static str },

    #[error("ground truth mask contains a value other than 0 or 1")]
    NonBinaryMask,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}
