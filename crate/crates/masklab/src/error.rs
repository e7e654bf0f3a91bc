use thiserror::Error;

/// Errors surfaced by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid token {token} at position {position} (vocabulary size {vocab_size})")]
    InvalidToken {
        token: u32,
        position: usize,
        vocab_size: u32,
    },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("noise level must lie in (0, 1], got {0}")]
    InvalidNoiseLevel(f64),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("enumeration of {states} states exceeds cap {cap}")]
    EnumerationCapExceeded { states: u128, cap: u64 },

    #[error("branch cap {cap} exceeded at block {block}, step {step} ({branches} branches)")]
    BranchCapExceeded {
        block: usize,
        step: usize,
        branches: u128,
        cap: u64,
    },

    #[error("zero-probability context when predicting position {position}")]
    ZeroProbabilityContext { position: usize },

    #[error("zero-probability token {token} at position {position} of sample {sample}")]
    ZeroProbabilityToken {
        sample: usize,
        position: usize,
        token: u32,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("inadmissible objective: {0}")]
    InadmissibleObjective(String),

    #[error("unknown objective code {0:?}")]
    UnknownObjectiveCode(String),

    #[error("model context scope {model:?} incompatible with objective {objective}")]
    ScopeMismatch { model: String, objective: String },

    #[error("non-finite loss encountered")]
    NonFiniteLoss,

    #[error("empty sample: at least one Monte-Carlo draw is required")]
    EmptySample,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("n-gram order {n} exceeds shortest sequence length {min_len}")]
    NgramTooLong { n: usize, min_len: usize },

    #[error("coherence undefined: no sample splits into two or more sentences")]
    CoherenceUndefined,

    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("invalid decode config: {0}")]
    InvalidDecodeConfig(String),

    #[error("malformed line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
