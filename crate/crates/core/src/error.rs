use std::path::PathBuf;

/// Errors raised anywhere in the detection pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file header or payload.
    #[error("format error: {0}")]
    Format(String),

    /// Payload ended before the header-declared size was reached.
    #[error("truncated payload at byte offset {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },

    /// A block or region does not fit inside its image.
    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("argument error: {0}")]
    Argument(String),

    /// Tensor shape did not match what a layer expects.
    #[error("shape error in layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },

    /// A required upstream artifact is missing.
    #[error("missing dependency: {0}")]
    Dependency(String),

    /// Experiment plan is malformed or inconsistent.
    #[error("plan error: {0}")]
    Plan(String),

    /// An internal consistency check failed.
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
