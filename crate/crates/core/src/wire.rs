//! Completions-shaped wire protocol: line-delimited JSON records over a
//! local TCP socket.
//!
//! One request object per line, one response object per line. The schema
//! is fixed:
//!
//! ```text
//! request  = {"completions": {"prompt": [1,2,3] | "text",
//!                             "max_tokens": 1,
//!                             "logit_bias": {"17": 4.5},
//!                             "logprobs": 5,
//!                             "echo": false,
//!                             "seed": 0}}
//!          | {"moderations": {"input": ["text", ...]}}
//!
//! response = {"completion": {"tokens": [..], "text": "..",
//!                            "top_logprobs": [[[id, lp], ..], ..],
//!                            "prompt_logprobs": [lp, ..] | null,
//!                            "usage": {"prompt_tokens": p,
//!                                      "completion_tokens": c}}}
//!          | {"moderation": {"results": [{"category_scores": {..},
//!                                         "categories": {..},
//!                                         "flagged": bool}, ..]}}
//!          | {"error": {"code": "..", "message": ".."}}
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSeq};

/// API feature regime the mock reproduces.
///
/// * `PromptLogprobs` — prompt-token logprobs are available via `echo`.
/// * `BiasedTopK` — no prompt logprobs; the logit bias affects the
///   reported top-k, so boosted tokens can be read off directly.
/// * `UnbiasedTopK` — the bias still affects sampling but the reported
///   top-k comes from the unbiased distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApiEra {
    PromptLogprobs,
    BiasedTopK,
    UnbiasedTopK,
}

impl FromStr for ApiEra {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt-logprobs" => Ok(ApiEra::PromptLogprobs),
            "biased-topk" => Ok(ApiEra::BiasedTopK),
            "unbiased-topk" => Ok(ApiEra::UnbiasedTopK),
            other => Err(Error::InvalidConfig(format!(
                "unknown era {other:?} (expected prompt-logprobs, biased-topk or unbiased-topk)"
            ))),
        }
    }
}

impl std::fmt::Display for ApiEra {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ApiEra::PromptLogprobs => "prompt-logprobs",
            ApiEra::BiasedTopK => "biased-topk",
            ApiEra::UnbiasedTopK => "unbiased-topk",
        };
        f.write_str(s)
    }
}

pub const MAX_TOP_LOGPROBS: u8 = 5;
pub const MAX_BIAS_ENTRIES: usize = 300;
pub const BIAS_CLAMP: f64 = 100.0;
/// Per-logit noise scale matching a loss-level standard deviation of 0.068
/// over an 8-token target (0.068 / sqrt(8)).
pub const DEFAULT_NOISE_SIGMA: f64 = 0.024041630560342618;

/// Prompt as raw token ids or as text to be tokenized server-side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptInput {
    Tokens(TokenSeq),
    Text(String),
}

impl From<TokenSeq> for PromptInput {
    fn from(seq: TokenSeq) -> Self {
        PromptInput::Tokens(seq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: PromptInput,
    #[serde(default)]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub logit_bias: BTreeMap<TokenId, f64>,
    /// Number of top logprobs to report per sampled position, 0..=5.
    #[serde(default)]
    pub logprobs: u8,
    /// Honored only in the `PromptLogprobs` era.
    #[serde(default)]
    pub echo: bool,
    #[serde(default)]
    pub seed: u64,
}

impl CompletionRequest {
    pub fn from_tokens(seq: TokenSeq, max_tokens: u32) -> Self {
        CompletionRequest {
            prompt: PromptInput::Tokens(seq),
            max_tokens,
            logit_bias: BTreeMap::new(),
            logprobs: 0,
            echo: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.logprobs > MAX_TOP_LOGPROBS {
            return Err(Error::Protocol {
                code: "invalid_logprobs".into(),
                message: format!("logprobs {} exceeds the maximum of 5", self.logprobs),
            });
        }
        if self.logit_bias.len() > MAX_BIAS_ENTRIES {
            return Err(Error::Protocol {
                code: "bias_map_too_large".into(),
                message: format!(
                    "logit_bias has {} entries, maximum is {MAX_BIAS_ENTRIES}",
                    self.logit_bias.len()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    /// Greedily sampled continuation.
    pub tokens: Vec<TokenId>,
    pub text: String,
    /// Per sampled position: `(token, logprob)` entries sorted by
    /// descending logprob (ties by ascending token id).
    pub top_logprobs: Vec<Vec<(TokenId, f64)>>,
    /// Per-token logprobs of the prompt itself; present only when `echo`
    /// was requested in the `PromptLogprobs` era.
    pub prompt_logprobs: Option<Vec<f64>>,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModerationRequest {
    pub input: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModerationResult {
    pub category_scores: BTreeMap<String, f64>,
    pub categories: BTreeMap<String, bool>,
    /// True when any category flag is raised.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModerationResponse {
    pub results: Vec<ModerationResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireRequest {
    Completions(CompletionRequest),
    Moderations(ModerationRequest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireResponse {
    Completion(CompletionResponse),
    Moderation(ModerationResponse),
    Error(WireError),
}

/// Gaussian perturbation of the model logits, renormalized through the
/// log-softmax. Disabled noise means bitwise-reproducible responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn off() -> Self {
        NoiseConfig {
            enabled: false,
            sigma: 0.0,
            seed: 0,
        }
    }

    pub fn with_sigma(sigma: f64, seed: u64) -> Self {
        NoiseConfig {
            enabled: sigma > 0.0,
            sigma,
            seed,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::off()
    }
}

pub fn write_frame<W: Write, T: Serialize>(writer: &mut W, value: &T) -> Result<()> {
    let mut line = serde_json::to_string(value).map_err(|e| Error::Protocol {
        code: "encode_error".into(),
        message: e.to_string(),
    })?;
    line.push('\n');
    writer.write_all(line.as_bytes())?;
    writer.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on clean EOF.
pub fn read_frame<R: BufRead, T: for<'de> Deserialize<'de>>(reader: &mut R) -> Result<Option<T>> {
    let mut line = String::new();
    let n = reader.read_line(&mut line)?;
    if n == 0 {
        return Ok(None);
    }
    let value = serde_json::from_str(line.trim_end()).map_err(|e| Error::Protocol {
        code: "decode_error".into(),
        message: e.to_string(),
    })?;
    Ok(Some(value))
}
