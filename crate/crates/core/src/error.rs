//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot tokenize: no vocabulary entry matches text at byte offset {position}")]
    Tokenize { position: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: u32 },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),

    #[error("buffer is empty")]
    EmptyBuffer,

    #[error("degenerate probability {0} (must lie strictly inside (0, 1))")]
    DegenerateProbability(f64),

    #[error(
        "budget exceeded: spent {spent_usd:.6} USD of {budget_usd:.6} \
         ({prompt_tokens} prompt / {completion_tokens} completion tokens, {requests} requests)"
    )]
    BudgetExceeded {
        spent_usd: f64,
        budget_usd: f64,
        prompt_tokens: u64,
        completion_tokens: u64,
        requests: u64,
    },

    #[error("query budget exceeded: used {used} of {limit}")]
    QueryBudgetExceeded { used: u64, limit: u64 },

    #[error("token {token} never surfaced in the reported logprobs at maximum bias {max_bias}")]
    UnreachableToken { token: u32, max_bias: f64 },

    #[error("protocol error [{code}]: {message}")]
    Protocol { code: String, message: String },

    #[error("transport failure after {attempts} attempt(s): {source}")]
    Transport {
        attempts: u32,
        #[source]
        source: std::io::Error,
    },

    #[error("moderation batch of {0} exceeds the maximum batch size of 32")]
    BatchTooLarge(usize),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
