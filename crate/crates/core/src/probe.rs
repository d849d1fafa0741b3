//! Conditional-logprob reconstruction through the restricted completions
//! API: bias correction, adaptive bias choice, binary-search fallbacks and
//! the super-linear scoring cost model.
//!
//! Boosting a token into the reported top-k distorts its logprob; the
//! distortion is exactly invertible:
//!
//! ```text
//! p_true = p_biased / (e^bias * (1 - p_biased) + p_biased)
//! ```
//!
//! The primitives below work on logprobs with `exp_m1`/`ln_1p` so the
//! inversion stays accurate even when the biased probability is within a
//! few ulps of 1, where the linear form loses everything.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::client::ApiClient;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSeq};
use crate::wire::{ApiEra, CompletionRequest};

/// `log q` for the biased probability `q` of a token with true logprob
/// `lp` after adding `bias` to its logit: `-log1p((1-p)/p * e^-bias)`.
pub fn bias_apply_logprob(lp: f64, bias: f64) -> f64 {
    let one_minus_p = -f64::exp_m1(lp);
    -f64::ln_1p(one_minus_p * (-lp - bias).exp())
}

/// Inverse of [`bias_apply_logprob`]:
/// `log p = -log1p(e^bias * (1-q)/q)`. The argument is non-negative, so
/// the form is cancellation-free for every bias sign.
pub fn unbias_logprob(lq: f64, bias: f64) -> f64 {
    let one_minus_q = -f64::exp_m1(lq);
    -f64::ln_1p(one_minus_q * (bias - lq).exp())
}

/// Linear-probability form of the bias correction. Errors on 0 and 1,
/// where the distortion is no longer invertible.
pub fn unbias(p_biased: f64, bias: f64) -> Result<f64> {
    if !(p_biased > 0.0 && p_biased < 1.0) {
        return Err(Error::DegenerateProbability(p_biased));
    }
    Ok(unbias_logprob(p_biased.ln(), bias).exp())
}

/// Linear-probability forward simulation of applying `bias` to one token
/// of a softmax; the test oracle for [`unbias`].
pub fn bias_apply(p: f64, bias: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::DegenerateProbability(p));
    }
    Ok(bias_apply_logprob(p.ln(), bias).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMethod {
    /// Read straight off the reported logprobs (echo, or unbiased top-k).
    Direct,
    /// One biased probe, corrected through the inversion formula.
    BiasedTop5,
    /// Geometric expansion plus bisection.
    BinarySearch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogprobEstimate {
    /// Reconstructed logprob, always <= 0.
    pub value: f64,
    pub method: ProbeMethod,
    pub queries_used: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub max_bias: f64,
    /// Bisection stops when the bias bracket is narrower than this.
    pub bisect_tol: f64,
    /// Readings with `p_biased > 1 - degenerate_guard` are rejected and
    /// re-probed at a lower bias.
    pub degenerate_guard: f64,
    pub top_k: u8,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            max_bias: 100.0,
            bisect_tol: 1e-3,
            degenerate_guard: 1e-9,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CumulativeScore {
    pub logprob: f64,
    /// True when trailing terms were skipped because the partial sum had
    /// already dropped below the stop threshold.
    pub short_circuited: bool,
    pub queries: u64,
}

/// Stateful logprob reconstruction over one client connection. Caches the
/// per-position probabilities of every prompt it scores so that a child
/// prompt (a single-token mutation) starts from its parent's estimates.
pub struct ProbeSession {
    pub client: ApiClient,
    era: ApiEra,
    cfg: ProbeConfig,
    cache: HashMap<(u64, usize), f64>,
    pub first_probe_attempts: u64,
    pub first_probe_hits: u64,
}

impl ProbeSession {
    pub fn new(client: ApiClient, era: ApiEra) -> ProbeSession {
        ProbeSession::with_config(client, era, ProbeConfig::default())
    }

    pub fn with_config(client: ApiClient, era: ApiEra, cfg: ProbeConfig) -> ProbeSession {
        ProbeSession {
            client,
            era,
            cfg,
            cache: HashMap::new(),
            first_probe_attempts: 0,
            first_probe_hits: 0,
        }
    }

    pub fn era(&self) -> ApiEra {
        self.era
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }

    /// Fraction of first bias probes that returned a clean reading.
    pub fn first_probe_hit_rate(&self) -> f64 {
        if self.first_probe_attempts == 0 {
            return 1.0;
        }
        self.first_probe_hits as f64 / self.first_probe_attempts as f64
    }

    fn probe(
        &mut self,
        prompt: &TokenSeq,
        prefix: &[TokenId],
        token: TokenId,
        bias: f64,
    ) -> Result<crate::wire::CompletionResponse> {
        let mut full = prompt.ids().to_vec();
        full.extend_from_slice(prefix);
        let mut req = CompletionRequest::from_tokens(TokenSeq::new(full), 1);
        req.logprobs = self.cfg.top_k;
        if bias != 0.0 {
            req.logit_bias.insert(token, bias);
        }
        // The prefix rides along in the prompt field but is billed at the
        // completion rate, matching the scoring cost model of pt prompt
        // and t(t+1)/2 completion tokens per scored pair.
        self.client
            .send_billed(&req, prompt.len() as u64, prefix.len() as u64 + 1)
    }

    /// Reconstructs `log P(token | prompt || target_prefix)`.
    ///
    /// `estimate` is a prior logprob guess for the token (typically the
    /// parent prompt's value at the same position); without one the cache
    /// and then a uniform prior are used.
    pub fn infer_token_logprob(
        &mut self,
        prompt: &TokenSeq,
        target_prefix: &TokenSeq,
        token: TokenId,
        estimate: Option<f64>,
    ) -> Result<LogprobEstimate> {
        let n = self.client.vocab().size();
        let lp_hat = estimate
            .or_else(|| {
                self.cache
                    .get(&(prompt.content_hash(), target_prefix.len()))
                    .copied()
            })
            .unwrap_or(-(n as f64).ln());
        let prefix = target_prefix.ids().to_vec();
        let result = match self.era {
            ApiEra::PromptLogprobs => self.infer_echo(prompt, &prefix, token),
            ApiEra::BiasedTopK => self.infer_biased(prompt, &prefix, token, lp_hat),
            ApiEra::UnbiasedTopK => self.infer_unbiased(prompt, &prefix, token, lp_hat),
        }?;
        self.cache
            .insert((prompt.content_hash(), target_prefix.len()), result.value);
        Ok(result)
    }

    fn infer_echo(
        &mut self,
        prompt: &TokenSeq,
        prefix: &[TokenId],
        token: TokenId,
    ) -> Result<LogprobEstimate> {
        let mut full = prompt.ids().to_vec();
        full.extend_from_slice(prefix);
        full.push(token);
        let mut req = CompletionRequest::from_tokens(TokenSeq::new(full), 0);
        req.echo = true;
        let resp = self.client.send(&req)?;
        let lps = resp.prompt_logprobs.ok_or_else(|| Error::Protocol {
            code: "echo_unsupported".into(),
            message: "server returned no prompt logprobs".into(),
        })?;
        let value = *lps.last().expect("nonempty prompt");
        Ok(LogprobEstimate {
            value: value.min(0.0),
            method: ProbeMethod::Direct,
            queries_used: 1,
        })
    }

    fn infer_biased(
        &mut self,
        prompt: &TokenSeq,
        prefix: &[TokenId],
        token: TokenId,
        lp_hat: f64,
    ) -> Result<LogprobEstimate> {
        let guard_lq = (1.0 - self.cfg.degenerate_guard).ln();
        let first_bias = (-lp_hat).clamp(0.0, self.cfg.max_bias);
        let mut queries = 0u32;

        self.first_probe_attempts += 1;
        let resp = self.probe(prompt, prefix, token, first_bias)?;
        queries += 1;
        match read_top(&resp, token) {
            Some(lq) if lq <= guard_lq => {
                self.first_probe_hits += 1;
                return Ok(LogprobEstimate {
                    value: unbias_logprob(lq, first_bias).min(0.0),
                    method: ProbeMethod::BiasedTop5,
                    queries_used: queries,
                });
            }
            Some(_) => {
                // Degenerate reading: lower the bias and retry once before
                // falling back to bisection.
                let lower = first_bias / 2.0;
                let resp = self.probe(prompt, prefix, token, lower)?;
                queries += 1;
                if let Some(lq) = read_top(&resp, token) {
                    if lq <= guard_lq {
                        return Ok(LogprobEstimate {
                            value: unbias_logprob(lq, lower).min(0.0),
                            method: ProbeMethod::BiasedTop5,
                            queries_used: queries,
                        });
                    }
                    return self.bisect_biased(prompt, prefix, token, 0.0, lower, queries);
                }
                return self.bisect_biased(prompt, prefix, token, lower, first_bias, queries);
            }
            None => {}
        }

        // Token absent from the top-k: expand the bias geometrically until
        // it surfaces, then read (or bisect away a degenerate reading).
        let mut lo = first_bias;
        let mut bias = first_bias;
        loop {
            if bias >= self.cfg.max_bias {
                return Err(Error::UnreachableToken {
                    token,
                    max_bias: self.cfg.max_bias,
                });
            }
            bias = if bias < 1.0 {
                1.0
            } else {
                (bias * 2.0).min(self.cfg.max_bias)
            };
            let resp = self.probe(prompt, prefix, token, bias)?;
            queries += 1;
            match read_top(&resp, token) {
                Some(lq) if lq <= guard_lq => {
                    return Ok(LogprobEstimate {
                        value: unbias_logprob(lq, bias).min(0.0),
                        method: ProbeMethod::BinarySearch,
                        queries_used: queries,
                    });
                }
                Some(_) => return self.bisect_biased(prompt, prefix, token, lo, bias, queries),
                None => lo = bias,
            }
        }
    }

    /// Bisects between a bias where the token was absent (or overshot) and
    /// one where the reading was degenerate, looking for a clean reading.
    fn bisect_biased(
        &mut self,
        prompt: &TokenSeq,
        prefix: &[TokenId],
        token: TokenId,
        mut lo: f64,
        mut hi: f64,
        mut queries: u32,
    ) -> Result<LogprobEstimate> {
        let guard_lq = (1.0 - self.cfg.degenerate_guard).ln();
        let mut best_effort: Option<(f64, f64)> = None;
        while hi - lo > self.cfg.bisect_tol {
            let mid = 0.5 * (lo + hi);
            let resp = self.probe(prompt, prefix, token, mid)?;
            queries += 1;
            match read_top(&resp, token) {
                Some(lq) if lq <= guard_lq => {
                    return Ok(LogprobEstimate {
                        value: unbias_logprob(lq, mid).min(0.0),
                        method: ProbeMethod::BinarySearch,
                        queries_used: queries,
                    });
                }
                Some(lq) => {
                    best_effort = Some((lq, mid));
                    hi = mid;
                }
                None => lo = mid,
            }
        }
        match best_effort {
            // The degenerate reading is still invertible, just lossy.
            Some((lq, bias)) => Ok(LogprobEstimate {
                value: unbias_logprob(lq, bias).min(0.0),
                method: ProbeMethod::BinarySearch,
                queries_used: queries,
            }),
            None => Err(Error::UnreachableToken {
                token,
                max_bias: hi,
            }),
        }
    }

    /// Bisects the minimal bias at which the token becomes the greedy
    /// sample; the reported top-k stays unbiased in this era, so the value
    /// is `top-token logprob - b*`.
    fn infer_unbiased(
        &mut self,
        prompt: &TokenSeq,
        prefix: &[TokenId],
        token: TokenId,
        lp_hat: f64,
    ) -> Result<LogprobEstimate> {
        let b0 = (-lp_hat).clamp(0.0, self.cfg.max_bias);
        let mut queries = 0u32;

        self.first_probe_attempts += 1;
        let resp = self.probe(prompt, prefix, token, b0)?;
        queries += 1;
        if let Some(lp) = read_top(&resp, token) {
            // Unbiased top-k: the reading is exact.
            self.first_probe_hits += 1;
            return Ok(LogprobEstimate {
                value: lp.min(0.0),
                method: ProbeMethod::Direct,
                queries_used: queries,
            });
        }
        let top_lp = resp.top_logprobs[0]
            .first()
            .map(|&(_, lp)| lp)
            .ok_or_else(|| Error::Protocol {
                code: "missing_logprobs".into(),
                message: "probe response carried no top logprobs".into(),
            })?;

        let (mut lo, mut hi);
        if resp.tokens[0] == token {
            lo = 0.0;
            hi = b0;
        } else {
            lo = b0;
            let mut bias = b0;
            loop {
                if bias >= self.cfg.max_bias {
                    return Err(Error::UnreachableToken {
                        token,
                        max_bias: self.cfg.max_bias,
                    });
                }
                bias = if bias < 1.0 {
                    1.0
                } else {
                    (bias * 2.0).min(self.cfg.max_bias)
                };
                let resp = self.probe(prompt, prefix, token, bias)?;
                queries += 1;
                if resp.tokens[0] == token {
                    hi = bias;
                    break;
                }
                lo = bias;
            }
        }
        while hi - lo > self.cfg.bisect_tol {
            let mid = 0.5 * (lo + hi);
            let resp = self.probe(prompt, prefix, token, mid)?;
            queries += 1;
            if resp.tokens[0] == token {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let flip = 0.5 * (lo + hi);
        Ok(LogprobEstimate {
            value: (top_lp - flip).min(0.0),
            method: ProbeMethod::BinarySearch,
            queries_used: queries,
        })
    }

    /// Sum of per-token logprobs of `target` conditioned on `prompt`.
    ///
    /// `stop_below` cuts the computation short once the partial sum drops
    /// strictly below it: every omitted term is non-positive, so the
    /// returned value bounds the exact one from above while staying below
    /// the threshold. `parent` keys the estimate cache when the prompt is
    /// a single-token mutation of an already-scored prompt.
    pub fn cumulative_logprob(
        &mut self,
        prompt: &TokenSeq,
        target: &TokenSeq,
        stop_below: Option<f64>,
        parent: Option<&TokenSeq>,
    ) -> Result<CumulativeScore> {
        if target.is_empty() {
            return Ok(CumulativeScore {
                logprob: 0.0,
                short_circuited: false,
                queries: 0,
            });
        }
        if self.era == ApiEra::PromptLogprobs {
            let full = prompt.concat(target);
            let mut req = CompletionRequest::from_tokens(full, 0);
            req.echo = true;
            let resp = self.client.send(&req)?;
            let lps = resp.prompt_logprobs.ok_or_else(|| Error::Protocol {
                code: "echo_unsupported".into(),
                message: "server returned no prompt logprobs".into(),
            })?;
            let logprob = lps[prompt.len()..].iter().sum();
            return Ok(CumulativeScore {
                logprob,
                short_circuited: false,
                queries: 1,
            });
        }

        let self_hash = prompt.content_hash();
        let parent_hash = parent.map(TokenSeq::content_hash);
        let mut total = 0.0;
        let mut queries = 0u64;
        for i in 0..target.len() {
            let estimate = parent_hash
                .and_then(|h| self.cache.get(&(h, i)).copied())
                .or_else(|| self.cache.get(&(self_hash, i)).copied());
            let prefix = TokenSeq::new(target.ids()[..i].to_vec());
            let step = self.infer_token_logprob(prompt, &prefix, target.ids()[i], estimate)?;
            total += step.value;
            queries += step.queries_used as u64;
            if let Some(threshold) = stop_below {
                if total < threshold && i + 1 < target.len() {
                    return Ok(CumulativeScore {
                        logprob: total,
                        short_circuited: true,
                        queries,
                    });
                }
            }
        }
        Ok(CumulativeScore {
            logprob: total,
            short_circuited: false,
            queries,
        })
    }
}

fn read_top(resp: &crate::wire::CompletionResponse, token: TokenId) -> Option<f64> {
    resp.top_logprobs
        .first()?
        .iter()
        .find(|&&(t, _)| t == token)
        .map(|&(_, lp)| lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn unbias_identity_at_zero_bias() {
        for p in [0.001, 0.25, 0.5, 0.93] {
            assert!((unbias(p, 0.0).unwrap() - p).abs() < 1e-15);
        }
    }

    #[test]
    fn unbias_matches_three_token_forward_simulation() {
        // Distribution (0.7, 0.2, 0.1); bias ln(4) on the 0.1 token gives
        // biased weights (0.7, 0.2, 0.4), so p_biased = 0.4 / 1.3.
        let bias = 4.0f64.ln();
        let p_biased = 0.4 / 1.3;
        let p = unbias(p_biased, bias).unwrap();
        assert!((p - 0.1).abs() < 1e-12, "recovered {p}");
        assert!((bias_apply(0.1, bias).unwrap() - p_biased).abs() < 1e-12);
    }

    #[test]
    fn degenerate_probabilities_error() {
        assert!(matches!(
            unbias(0.0, 1.0),
            Err(Error::DegenerateProbability(_))
        ));
        assert!(matches!(
            unbias(1.0, 1.0),
            Err(Error::DegenerateProbability(_))
        ));
        assert!(matches!(
            bias_apply(1.0, 1.0),
            Err(Error::DegenerateProbability(_))
        ));
    }

    #[test]
    fn roundtrip_accuracy_over_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
            let b: f64 = rng.random_range(-20.0..20.0);
            let lq = bias_apply_logprob(p.ln(), b);
            let back = unbias_logprob(lq, b).exp();
            assert!(
                (back - p).abs() < 1e-12,
                "p={p} b={b} recovered={back} err={}",
                (back - p).abs()
            );
        }
    }

    #[test]
    fn roundtrip_survives_near_one_biased_probabilities() {
        // p moderate with a large bias drives q within a few ulps of 1;
        // the log-space pipeline must not care.
        for (p, b) in [(0.5, 20.0), (0.999999, 20.0), (0.9, 18.0), (1e-6, -20.0)] {
            let lq = bias_apply_logprob(f64::ln(p), b);
            let back = unbias_logprob(lq, b).exp();
            assert!((back - p).abs() < 1e-12, "p={p} b={b} back={back}");
        }
    }
}
