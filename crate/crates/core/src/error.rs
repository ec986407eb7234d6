use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("sequence length {len} exceeds the position table size {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("attention mask covers {mask} positions but the sequence has {seq}")]
    MaskMismatch { mask: usize, seq: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("vocabulary max_size {0} cannot hold the 5 special tokens plus one word")]
    VocabTooSmall(usize),
    #[error("image of {height}x{width} is not divisible by {divisor}")]
    IndivisibleImage {
        height: usize,
        width: usize,
        divisor: usize,
    },
    #[error("target {target:?} does not occur in {text:?}")]
    TargetNotFound { text: String, target: String },
    #[error("need at least {min} examples, got {got}")]
    TooFewExamples { min: usize, got: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{preds} predictions vs {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class value {value} outside 0..{classes}")]
    ClassOutOfRange { value: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every run diverged ({0} runs)")]
    AllDiverged(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint does not match the model: missing {missing:?}, unexpected {extra:?}")]
    CheckpointMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
}
