use adakd_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("logits contain a non-finite value")]
    NonFiniteLogits,
    #[error("not a probability vector: {0}")]
    InvalidDistribution(String),
    #[error("vocabulary mismatch: {0} vs {1}")]
    VocabMismatch(usize, usize),
    #[error("target id {id} outside vocabulary of size {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("top-k requires 1 <= k <= {vocab}, got {k}")]
    InvalidTopK { k: usize, vocab: usize },
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("cross-entropy difficulty needs target ids")]
    MissingTargets,
    #[error("no valid tokens to select from")]
    NoValidTokens,
    #[error("empty token selection")]
    EmptySelection,
    #[error("non-finite loss {loss} at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error("dataset line {line}: {message}")]
    DatasetRecord { line: usize, message: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("tokenizer: character {ch:?} at byte {offset} is not in the vocabulary")]
    Unencodable { ch: char, offset: usize },
    #[error("evaluation: {0}")]
    Eval(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
