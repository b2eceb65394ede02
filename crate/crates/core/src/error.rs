use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value outside the admissible set (e.g. a non-±1 element handed to `pack`).
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// Shapes or lengths that do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation whose output would have zero length.
    #[error("empty output: {0}")]
    EmptyOutput(String),

    /// A class label outside `0..n_classes`.
    #[error("invalid label {label} for {n_classes} classes")]
    InvalidLabel { label: usize, n_classes: usize },

    /// Input that is well-formed but not usable here (wrong mode, empty dataset, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A malformed row in a text dataset.
    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    /// A malformed binary file.
    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Problems found while decoding one of the binary file formats.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u8, found: u8 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("{0} trailing bytes after the end of the file")]
    TrailingBytes(usize),

    #[error("malformed content: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
