use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: mask has no valid entries")]
    EmptyMask { op: &'static str },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("label {value} out of range for {what}")]
    LabelOutOfRange { what: &'static str, value: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures decoding on-disk datasets, checkpoints and text artifacts.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{path}: truncated payload (need {needed} bytes, have {available})")]
    Truncated {
        path: PathBuf,
        needed: usize,
        available: usize,
    },

    #[error("scan {scan_id}: manifest says {manifest} slices, feature file has {file}")]
    SliceCountMismatch {
        scan_id: String,
        manifest: usize,
        file: usize,
    },

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
