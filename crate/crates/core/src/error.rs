use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A dimension disagreed with what an operation requires.
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },
    /// Wrong number of dimensions.
    Rank {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    /// Data length does not match the product of the shape.
    DataLength { shape: Vec<usize>, len: usize },
    InvalidArgument {
        op: &'static str,
        reason: String,
    },
    /// `backward` was called on something other than a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// Every pixel of a batch carried the ignore label.
    AllIgnored,
    /// Batch statistics over a single element.
    DegenerateVariance { op: &'static str },
    /// A NaN or infinity showed up where finite values are required.
    NonFinite { what: String },
    /// A sample with zero variance was passed to a correlation statistic.
    DegenerateSample,
    /// Not enough observations for a statistic.
    TooFewSamples { needed: usize, found: usize },
    /// A dataset split or metric input had nothing to work with.
    Empty { what: &'static str },
    /// An architecture refers to something the parameter store lacks.
    MissingParameter { name: String },
    InvalidArchitecture { reason: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                op,
                dim,
                expected,
                found,
            } => write!(
                f,
                "{op}: shape mismatch in {dim}: expected {expected}, found {found}"
            ),
            Error::Rank {
                op,
                expected,
                found,
            } => write!(f, "{op}: expected rank {expected}, found rank {found}"),
            Error::DataLength { shape, len } => {
                write!(f, "data length {len} does not match shape {shape:?}")
            }
            Error::InvalidArgument { op, reason } => write!(f, "{op}: {reason}"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::AllIgnored => write!(f, "cross_entropy: every pixel is ignored"),
            Error::DegenerateVariance { op } => {
                write!(f, "{op}: batch statistics over a single element")
            }
            Error::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Error::DegenerateSample => write!(f, "degenerate sample (zero variance)"),
            Error::TooFewSamples { needed, found } => {
                write!(f, "need at least {needed} observations, got {found}")
            }
            Error::Empty { what } => write!(f, "{what} is empty"),
            Error::MissingParameter { name } => write!(f, "missing parameter `{name}`"),
            Error::InvalidArchitecture { reason } => write!(f, "invalid architecture: {reason}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        reason: reason.into(),
    }
}
