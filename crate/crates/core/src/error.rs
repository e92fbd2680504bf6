use thiserror::Error;

/// Library-wide error type.
///
/// Variants map onto the failure classes the public operations document:
/// shape/dimension mismatches, numeric domain violations, non-finite
/// results, broken call contracts, bad configuration, and file-format
/// problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path} at line {line}, byte {byte}: {msg}")]
    Format {
        path: String,
        line: usize,
        byte: usize,
        msg: String,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code classification used by the command-line front end:
    /// configuration and input problems are 1, numeric or verification
    /// failures are 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Verification(_) => 2,
            _ => 1,
        }
    }
}
