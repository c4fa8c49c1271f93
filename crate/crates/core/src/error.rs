use std::io;

/// Errors produced by the kernels, the training engine and the file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("empty tensor")]
    Empty,

    #[error("lane length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid convolution geometry: {0}")]
    Geometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called without a recorded forward tape")]
    MissingTape,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
