use std::fmt;

use crate::autodiff::OpKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient in parameter block `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("training aborted at epoch {epoch}: {source}")]
    Training {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("Newton failed to converge at step {step} after {iterations} iterations (residual {residual:e})")]
    NewtonDivergence {
        step: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model has not been trained")]
    Untrained,

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by the numerics (divergence, NaN) rather than
    /// by bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFiniteGradient { .. }
            | Error::NonFiniteLoss { .. }
            | Error::NewtonDivergence { .. } => true,
            Error::Training { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

/// Errors raised while decoding one of the binary container files.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found}")]
    BadMagic {
        expected: &'static str,
        found: MagicBytes,
    },
    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported dtype {0:?} (only f64 is supported)")]
    DType(String),
    #[error("malformed header: {0}")]
    Header(String),
}

/// Raw magic bytes, printed lossily.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MagicBytes(pub Vec<u8>);

impl fmt::Display for MagicBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", String::from_utf8_lossy(&self.0))
    }
}
