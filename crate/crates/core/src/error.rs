//! Error type shared across the crate.

use std::fmt;
use std::path::PathBuf;

/// Errors produced by the engine, the attack family and the harness.
#[derive(Debug)]
pub enum Error {
    /// Input tensor shape does not match what an operation expects.
    Shape { expected: String, got: String },
    /// A non-finite value (NaN/Inf) appeared at an operation boundary.
    NumericFault { context: String },
    /// An index (shift amount, class label, coordinate) is out of range.
    Range { what: String, value: i64, bound: i64 },
    /// A model/dataset/attack specification is invalid.
    Spec(String),
    /// A container file is corrupt; `offset` is the byte position of the fault.
    Format { offset: u64, reason: String },
    /// File-system failure with path context.
    Io { path: PathBuf, source: std::io::Error },
    /// Experiment configuration is invalid or incomplete.
    Config(String),
    /// An experiment protocol precondition failed (eligibility, empty sets).
    Protocol(String),
    /// Training diverged; carries the epoch where the loss went non-finite.
    Training { epoch: usize, reason: String },
    /// Model does not support the requested analysis.
    Unsupported(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Error::NumericFault { context } => write!(f, "numeric fault: {context}"),
            Error::Range { what, value, bound } => {
                write!(f, "{what} = {value} out of range (bound {bound})")
            }
            Error::Spec(msg) => write!(f, "invalid spec: {msg}"),
            Error::Format { offset, reason } => {
                write!(f, "container format error at byte {offset}: {reason}")
            }
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Protocol(msg) => write!(f, "protocol error: {msg}"),
            Error::Training { epoch, reason } => {
                write!(f, "training fault at epoch {epoch}: {reason}")
            }
            Error::Unsupported(msg) => write!(f, "unsupported model: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 1 config, 2 io, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::NumericFault { .. } | Error::Training { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
