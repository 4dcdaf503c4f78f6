use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate distribution: every entry of softmax row {row} is masked")]
    DegenerateDistribution { row: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("finite-difference oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("token id {id} is outside the vocabulary of size {size}")]
    UnknownToken { id: usize, size: usize },

    #[error("vocabulary mismatch: expected hash {expected}, found {found}")]
    VocabularyMismatch { expected: String, found: String },

    #[error("sentence {index} has {len} tokens, exceeding the token budget {budget}")]
    OversizeSentence {
        index: usize,
        len: usize,
        budget: usize,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("training diverged at step {step}: loss {loss} stayed above twice the initial loss {initial}")]
    Divergence { step: usize, loss: f64, initial: f64 },

    #[error("non-finite gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
