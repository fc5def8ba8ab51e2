//! Error type shared by the tensor engine and the model layers.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensor operations and model construction.
///
/// Shape problems name both offending shapes; configuration problems name
/// the offending component; non-finite values are always an error state,
/// never silently propagated.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operand shapes cannot be combined by the requested operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has a shape the operation cannot accept.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    /// Invalid model or layer configuration (bad group factorization,
    /// head arithmetic, stage mismatch, ...).
    Config(String),
    /// An operation produced NaN or Inf. `context` carries the layer path
    /// when the failure happened inside a model forward.
    NonFinite { op: String, context: String },
    /// Checkpoint or report I/O failure.
    Io(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Prefix a layer name onto a non-finite diagnostic so the failing
    /// layer can be named at the model boundary.
    pub fn in_layer(self, layer: &str) -> Self {
        match self {
            Error::NonFinite { op, context } if context.is_empty() => Error::NonFinite {
                op,
                context: layer.to_string(),
            },
            Error::NonFinite { op, context } => Error::NonFinite {
                op,
                context: format!("{layer}.{context}"),
            },
            other => other,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::BadShape { op, shape, detail } => {
                write!(f, "{op}: bad shape {shape:?}: {detail}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::NonFinite { op, context } if context.is_empty() => {
                write!(f, "non-finite values produced by {op}")
            }
            Error::NonFinite { op, context } => {
                write!(f, "non-finite values produced by {op} in {context}")
            }
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
