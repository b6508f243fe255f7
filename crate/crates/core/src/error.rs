use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("every block is removed; nothing left to run")]
    EmptyModel,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("infeasible instance: {0}")]
    Infeasible(String),
    #[error("search space too large: {count} combinations exceeds cap {cap}")]
    TooLarge { count: u128, cap: u128 },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("inconsistent inputs: {0}")]
    Consistency(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures while decoding a binary frame (checkpoint or KV manifest).
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch in {section}: stored {stored:#010x}, computed {computed:#010x}")]
    Crc {
        section: &'static str,
        stored: u32,
        computed: u32,
    },
    #[error("stream truncated while reading {0}")]
    Truncated(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
}
