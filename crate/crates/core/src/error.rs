use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: output would be empty (input {input:?}, kernel {kernel}, stride {stride}, padding {padding})")]
    Geometry {
        op: &'static str,
        input: Vec<usize>,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("batch_norm: train mode needs at least two values per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("state error: {0}")]
    State(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("zoo incompatibility at parameter `{param}`: {reason}")]
    ZooIncompatible { param: String, reason: String },
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("empty dataset")]
    EmptyDataset,
}
