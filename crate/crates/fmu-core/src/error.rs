//! Error type shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter '{0}'")]
    UnknownParam(String),

    #[error("duplicate parameter '{0}'")]
    DuplicateParam(String),

    #[error("NaN gradient in parameter '{0}'")]
    NanGradient(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("trailing bytes after payload: {0} extra")]
    TrailingBytes(usize),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("manifest offsets do not partition the payload: {0}")]
    OffsetMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit-code category: 1 usage, 2 io, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Io(_)
            | Error::BadMagic { .. }
            | Error::TruncatedPayload { .. }
            | Error::TrailingBytes(_)
            | Error::MalformedHeader(_)
            | Error::OffsetMismatch(_) => 2,
            _ => 3,
        }
    }
}
