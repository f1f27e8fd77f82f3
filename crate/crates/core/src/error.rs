use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("input too short for the conv frontend: got {got_frames}x{got_dim}, need at least {min_frames}x{min_dim}")]
    InputTooShort {
        got_frames: usize,
        got_dim: usize,
        min_frames: usize,
        min_dim: usize,
    },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("target sequence must end with eos and contain it only once")]
    MissingEos,
    #[error("dot-product score needs equal widths, got {encoder} and {decoder}")]
    UnequalWidths { encoder: usize, decoder: usize },
    #[error("encoder produced no states")]
    EmptyEncoder,
    #[error("conv-mlp attention needs the previous attention weights")]
    MissingPreviousWeights,
    #[error("search space too large: {paths} paths (limit {limit})")]
    SearchSpaceTooLarge { paths: u128, limit: u128 },
    #[error("unrepresentable character {ch:?} at position {pos}")]
    UnrepresentableChar { ch: char, pos: usize },
    #[error("teacher distribution must be nonnegative and sum to 1, sum is {0}")]
    NotNormalized(f64),
    #[error("pseudo labels reference unknown utterances: {0:?}")]
    UnmatchedIds(Vec<String>),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("non-finite gradient from utterances {0:?}")]
    NonFiniteGradient(Vec<String>),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
}
