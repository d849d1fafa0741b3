//! Query-based adversarial prompt optimization toolkit.
//!
//! Everything needed to run black-box attacks against a completions-style
//! API, verified end to end against a deterministic toy language model
//! served behind a mock endpoint:
//!
//! * [`vocab`] — fixed vocabulary, greedy tokenizer, canonicalization.
//! * [`toylm`] — deterministic interpolated n-gram oracle and proxy.
//! * [`wire`], [`server`], [`client`] — the completions wire protocol, a
//!   mock server with API-era feature flags, and a budget-enforcing client.
//! * [`probe`] — exact logprob reconstruction through logit bias and
//!   top-k logprobs, with binary-search fallbacks.
//! * [`buffer`] — capacity-bounded min-max-heap candidate buffer.
//! * [`loss`] — target-string, universal and moderation objectives.
//! * [`engine`] — the GCQ optimizer, proxy-free variants, initialization
//!   and the re-evaluation harness.
//! * [`moderation`] — deterministic moderation-endpoint stand-in.
//! * [`cost`] — token/request/currency accounting with hard budgets.

pub mod buffer;
pub mod client;
pub mod cost;
pub mod engine;
pub mod error;
pub mod loss;
pub mod moderation;
pub mod probe;
pub mod server;
pub mod toylm;
pub mod vocab;
pub mod wire;

pub use error::{Error, Result};
pub use vocab::{TokenId, TokenSeq, Vocabulary};
