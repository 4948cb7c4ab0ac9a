use std::path::PathBuf;
use thiserror::Error;

/// Errors shared across the whole library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation contract (bad arity, non-scalar loss,
    /// unknown primitive, invalid rate, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric failure: non-finite values, NaN loss, failed convergence.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A file exists but its contents do not match the expected format.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Input data outside the domain of an operation (e.g. too-short signal).
    #[error("invalid input: {0}")]
    Input(String),

    /// An inconsistent or out-of-range configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// A sequence does not fit the positional embedding table.
    #[error("sequence length {len} exceeds positional capacity {cap}")]
    Length { len: usize, cap: usize },

    /// An underlying I/O failure, tagged with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
