use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents are inconsistent with what an operation requires.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A constructor was given extents and data that disagree.
    #[error("invalid tensor: shape {shape:?} implies {expected} elements, got {actual}")]
    InvalidTensor {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    /// Batch-norm evaluation requested before running statistics exist.
    #[error(
        "batch norm has no running statistics yet; initialize them explicitly \
         (mean 0, var 1) or run at least one training step first"
    )]
    BnUninitialized,

    /// `backward` was called on a non-scalar value.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// Adam step requested while a parameter has no gradient.
    #[error("parameter '{name}' has no gradient; run backward before the optimizer step")]
    MissingGradient { name: String },

    /// A named parameter was not found in the store.
    #[error("unknown parameter '{name}'")]
    UnknownParameter { name: String },

    /// Configuration or argument outside the supported range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// File-format violation (bad magic, version, or truncation).
    #[error("bad file format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step} (epoch {epoch}): {value}")]
    NonFiniteLoss { step: u64, epoch: u64, value: f64 },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
