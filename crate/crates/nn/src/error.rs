use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("token id {id} at position {position} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        position: usize,
        id: usize,
        vocab_size: usize,
    },
    #[error("sequence of length {len} exceeds the context length {context_length}")]
    SequenceTooLong { len: usize, context_length: usize },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
