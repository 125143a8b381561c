use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("label {0} is outside the class set")]
    UnknownLabel(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("the task-agnostic snapshot is missing")]
    MissingSnapshot,
    #[error("inconsistent pruning plan: {0}")]
    InconsistentPlan(String),
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("invalid learner state: {0}")]
    State(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
