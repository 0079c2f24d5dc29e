use alloc::string::String;

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("{what} index {index} out of range for {len} entries")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("missing input: {0}")]
    MissingInput(&'static str),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("split violates its contract: {0}")]
    Split(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
