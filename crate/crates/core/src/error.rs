use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes do not line up.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A precondition of an operation was violated.
    Contract(String),
    /// An index (token id, layer index, ...) is out of range.
    Index { what: &'static str, index: usize, len: usize },
    /// NaN or infinity where a finite value is required.
    Numeric(String),
    /// Invalid configuration; names the offending field.
    Config { field: &'static str, reason: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Index { what, index, len } => {
                write!(f, "{what} {index} out of range (len {len})")
            }
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Error::Config { field, reason } => write!(f, "config field `{field}`: {reason}"),
        }
    }
}

impl core::error::Error for Error {}
