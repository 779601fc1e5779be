use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate batch statistics: {0}")]
    DegenerateStats(String),

    #[error("patch too small: {h}x{w}, need at least 3x3")]
    PatchTooSmall { h: usize, w: usize },

    #[error("degenerate lighting: condition number {condition:.3e}")]
    DegenerateLighting { condition: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {kind}")]
    Parse { path: PathBuf, kind: ParseError },
}

/// Failure modes of the binary readers, kept distinct so callers can tell
/// a stale file from a damaged one.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic, not a recognised file")]
    BadMagic,
    #[error("unsupported format version {0:?}")]
    VersionMismatch(String),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed content: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, kind: ParseError) -> Self {
        Error::Parse {
            path: path.into(),
            kind,
        }
    }
}
