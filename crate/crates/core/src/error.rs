use std::path::PathBuf;

/// Crate-wide error type. Variants are grouped by subsystem so callers can
/// map them onto process exit codes (data vs numeric failures).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    /// A NaN or infinity appeared in an operation's output.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("checkpoint: bad magic bytes")]
    CheckpointBadMagic,

    #[error("checkpoint: unsupported format version {0}")]
    CheckpointBadVersion(u32),

    #[error("checkpoint: crc mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CheckpointCrcMismatch { stored: u32, computed: u32 },

    #[error("checkpoint: truncated file ({0})")]
    CheckpointTruncated(&'static str),

    #[error("netpbm: bad magic {0:?} (expected P5 or P6)")]
    PnmBadMagic(String),

    #[error("netpbm: unsupported maxval {0} (only 255 supported)")]
    PnmBadMaxval(u32),

    #[error("netpbm: truncated payload (expected {expected} bytes, got {got})")]
    PnmTruncated { expected: usize, got: usize },

    #[error("netpbm: malformed header: {0}")]
    PnmMalformed(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by NaN/Inf values rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
