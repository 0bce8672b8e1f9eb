use std::io;
use std::path::PathBuf;

/// Failures while parsing or validating one of the on-disk formats.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("zero extent in header field {0}")]
    ZeroExtent(&'static str),
    #[error("extent overflow: {0}")]
    ExtentOverflow(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("parameter {0} appears more than once")]
    DuplicateParameter(String),
    #[error("unexpected parameter {0}")]
    UnexpectedParameter(String),
    #[error("non-finite value in payload ({0})")]
    NonFinite(String),
}

impl FormatError {
    /// Stable numeric code, one per variant.
    pub fn code(&self) -> u32 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::BadHeader(_) => 2,
            FormatError::ZeroExtent(_) => 3,
            FormatError::ExtentOverflow(_) => 4,
            FormatError::TruncatedPayload { .. } => 5,
            FormatError::TrailingBytes(_) => 6,
            FormatError::ChecksumMismatch { .. } => 7,
            FormatError::MissingParameter(_) => 8,
            FormatError::DuplicateParameter(_) => 9,
            FormatError::UnexpectedParameter(_) => 10,
            FormatError::NonFinite(_) => 11,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("autodiff error: {0}")]
    Graph(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing intermediates: {0}")]
    MissingIntermediates(&'static str),
    #[error("format error: {0}")]
    Format(#[from] FormatError),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
