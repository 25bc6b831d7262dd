use alloc::string::String;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("domain violation at node {node} ({op}): {detail}")]
    Domain {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: alloc::vec::Vec<usize> },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid style label {0}; expected 1 or 2")]
    InvalidLabel(u8),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("statistics pooling over an empty set")]
    EmptySet,
    #[error("class {0} has no support examples; resample the episode")]
    EmptyClass(u8),
    #[error("no episode with both classes in the support set after {0} retries")]
    DegenerateEpisode(usize),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("every task in the meta-batch was skipped")]
    AllTasksSkipped,
    #[error("classifier training data must contain both classes")]
    SingleClass,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
