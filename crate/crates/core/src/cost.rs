//! Token, request and currency accounting with hard budget enforcement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-1k-token prices, in USD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub prompt_per_1k: f64,
    pub completion_per_1k: f64,
}

impl Default for Pricing {
    fn default() -> Self {
        // Instruct-tier completion pricing.
        Pricing {
            prompt_per_1k: 0.0015,
            completion_per_1k: 0.002,
        }
    }
}

impl Pricing {
    pub fn free() -> Self {
        Pricing {
            prompt_per_1k: 0.0,
            completion_per_1k: 0.0,
        }
    }

    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        prompt_tokens as f64 / 1000.0 * self.prompt_per_1k
            + completion_tokens as f64 / 1000.0 * self.completion_per_1k
    }
}

/// Monotone counters of consumed tokens and requests. With a budget set,
/// a charge that would push spend past the budget is refused before it is
/// committed, so the invariant `spend <= budget` holds at all times.
#[derive(Debug, Clone)]
pub struct CostLedger {
    prompt_tokens: u64,
    completion_tokens: u64,
    requests: u64,
    pricing: Pricing,
    budget_usd: Option<f64>,
}

/// Immutable copy of the ledger counters, embedded in traces.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub requests: u64,
    pub spend_usd: f64,
}

impl LedgerSnapshot {
    /// Counter-wise difference `self - earlier`.
    pub fn delta(&self, earlier: &LedgerSnapshot) -> LedgerSnapshot {
        LedgerSnapshot {
            prompt_tokens: self.prompt_tokens - earlier.prompt_tokens,
            completion_tokens: self.completion_tokens - earlier.completion_tokens,
            requests: self.requests - earlier.requests,
            spend_usd: self.spend_usd - earlier.spend_usd,
        }
    }
}

impl CostLedger {
    pub fn new(pricing: Pricing, budget_usd: Option<f64>) -> Self {
        CostLedger {
            prompt_tokens: 0,
            completion_tokens: 0,
            requests: 0,
            pricing,
            budget_usd,
        }
    }

    pub fn unlimited() -> Self {
        CostLedger::new(Pricing::default(), None)
    }

    pub fn pricing(&self) -> Pricing {
        self.pricing
    }

    pub fn budget_usd(&self) -> Option<f64> {
        self.budget_usd
    }

    pub fn prompt_tokens(&self) -> u64 {
        self.prompt_tokens
    }

    pub fn completion_tokens(&self) -> u64 {
        self.completion_tokens
    }

    pub fn requests(&self) -> u64 {
        self.requests
    }

    pub fn spend_usd(&self) -> f64 {
        self.pricing
            .cost(self.prompt_tokens, self.completion_tokens)
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            prompt_tokens: self.prompt_tokens,
            completion_tokens: self.completion_tokens,
            requests: self.requests,
            spend_usd: self.spend_usd(),
        }
    }

    fn budget_error(&self) -> Error {
        Error::BudgetExceeded {
            spent_usd: self.spend_usd(),
            budget_usd: self.budget_usd.unwrap_or(f64::INFINITY),
            prompt_tokens: self.prompt_tokens,
            completion_tokens: self.completion_tokens,
            requests: self.requests,
        }
    }

    /// Refuses when the projected spend would exceed the budget. Called
    /// before a request goes on the wire.
    pub fn ensure_affordable(&self, prompt_tokens: u64, completion_tokens: u64) -> Result<()> {
        if let Some(budget) = self.budget_usd {
            let projected = self.pricing.cost(
                self.prompt_tokens + prompt_tokens,
                self.completion_tokens + completion_tokens,
            );
            if projected > budget {
                return Err(self.budget_error());
            }
        }
        Ok(())
    }

    /// Checks then commits one request's worth of tokens.
    pub fn charge(&mut self, prompt_tokens: u64, completion_tokens: u64) -> Result<()> {
        self.ensure_affordable(prompt_tokens, completion_tokens)?;
        self.prompt_tokens += prompt_tokens;
        self.completion_tokens += completion_tokens;
        self.requests += 1;
        Ok(())
    }

    /// A request that consumes no tokens (the moderation route is free;
    /// only the request counter moves).
    pub fn charge_request_only(&mut self) {
        self.requests += 1;
    }
}
