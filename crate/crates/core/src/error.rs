use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: operand `{operand}` expected shape {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        operand: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("block variant mismatch: expected {expected}, got {got}")]
    VariantMismatch { expected: &'static str, got: &'static str },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("cross entropy over an all-zero loss mask is undefined")]
    EmptyLossMask,

    #[error("corpus too small: need at least {needed} tokens, have {have}")]
    CorpusTooSmall { needed: usize, have: usize },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("invalid config: {0}")]
    Validation(String),

    #[error("unknown parameter name `{0}`")]
    UnknownParam(String),

    #[error("no records in window [{start}, {end}]")]
    EmptyWindow { start: usize, end: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error in {file}: {msg}")]
    Parse { file: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
