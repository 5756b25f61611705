use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("config line {line}: {reason}")]
    ConfigLine { line: usize, reason: String },

    #[error("loss mode {mode} requires weight `{weight}`")]
    MissingWeight { mode: &'static str, weight: &'static str },

    #[error("truncated stream")]
    TruncatedStream,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {what} version {found} (this build reads version {expected})")]
    VersionMismatch {
        what: &'static str,
        found: u8,
        expected: u8,
    },

    #[error("incompatible stream: {0}")]
    Incompatible(String),

    #[error("malformed {format} at byte {offset}: {reason}")]
    Malformed {
        format: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("truncated {format} pixel data: expected {expected} bytes, found {actual}")]
    TruncatedPixels {
        format: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by a file being in the wrong format or version.
    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Error::TruncatedStream
                | Error::BadMagic { .. }
                | Error::VersionMismatch { .. }
                | Error::Incompatible(_)
                | Error::Malformed { .. }
                | Error::TruncatedPixels { .. }
                | Error::Png(_)
        )
    }
}
