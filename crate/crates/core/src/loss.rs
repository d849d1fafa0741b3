//! Objective functions: target-string loss with short-circuiting, the
//! multi-string universal loss, the moderation sum-of-scores loss, and the
//! success predicates. Oracle dispatch (local model vs. remote API) lives
//! here so the attack engines stay oracle-agnostic.

use std::sync::Arc;

use crate::cost::LedgerSnapshot;
use crate::error::Result;
use crate::moderation::{ModerationModel, MAX_MODERATION_BATCH};
use crate::probe::ProbeSession;
use crate::toylm::ToyLm;
use crate::vocab::{TokenSeq, Vocabulary};
use crate::wire::CompletionRequest;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOutcome {
    pub loss: f64,
    /// The evaluation stopped early; `loss` is a lower bound on the exact
    /// loss and already exceeds the rejection threshold it was given.
    pub short_circuited: bool,
}

impl LossOutcome {
    fn exact(loss: f64) -> Self {
        LossOutcome {
            loss,
            short_circuited: false,
        }
    }
}

/// What the attack engines need from an objective: true loss, optional
/// proxy loss, and a success predicate, with query accounting.
pub trait AttackObjective {
    fn vocab_size(&self) -> u32;

    /// Loss of a candidate. `stop_below` is the worst loss still worth
    /// computing exactly (typically the buffer's worst); the evaluation
    /// may stop once the loss provably exceeds it. `parent` identifies the
    /// already-scored prompt this candidate was mutated from.
    fn true_loss(
        &mut self,
        seq: &TokenSeq,
        stop_below: Option<f64>,
        parent: Option<&TokenSeq>,
    ) -> Result<LossOutcome>;

    fn has_proxy(&self) -> bool;

    fn proxy_loss(&mut self, seq: &TokenSeq) -> Result<f64>;

    fn check_success(&mut self, seq: &TokenSeq) -> Result<bool>;

    /// Loss evaluations (per scored text for moderation objectives) plus
    /// success checks performed so far.
    fn queries(&self) -> u64;

    fn ledger(&self) -> LedgerSnapshot;

    /// Target-repetition initialization prompt, when the objective has a
    /// definite target to repeat.
    fn repeat_init(&self, m: usize) -> Option<TokenSeq>;
}

/// Scoring backend for language-model objectives.
pub enum LmOracle {
    Local(ToyLm),
    Remote(ProbeSession),
}

impl LmOracle {
    fn cumulative_logprob(
        &mut self,
        prompt: &TokenSeq,
        target: &TokenSeq,
        stop_below_logprob: Option<f64>,
        parent: Option<&TokenSeq>,
    ) -> Result<(f64, bool)> {
        match self {
            LmOracle::Local(lm) => {
                let mut ctx = prompt.ids().to_vec();
                let mut total = 0.0;
                for (i, &t) in target.ids().iter().enumerate() {
                    total += lm.conditional_logprob(&ctx, t);
                    ctx.push(t);
                    if let Some(threshold) = stop_below_logprob {
                        if total < threshold && i + 1 < target.len() {
                            return Ok((total, true));
                        }
                    }
                }
                Ok((total, false))
            }
            LmOracle::Remote(probe) => {
                let score = probe.cumulative_logprob(prompt, target, stop_below_logprob, parent)?;
                Ok((score.logprob, score.short_circuited))
            }
        }
    }

    fn greedy_generate(&mut self, prompt: &TokenSeq, n_tokens: usize) -> Result<TokenSeq> {
        match self {
            LmOracle::Local(lm) => Ok(lm.greedy_generate(prompt, n_tokens)),
            LmOracle::Remote(probe) => {
                let req = CompletionRequest::from_tokens(prompt.clone(), n_tokens as u32);
                let resp = probe.client.send(&req)?;
                Ok(TokenSeq::new(resp.tokens))
            }
        }
    }

    fn ledger(&self) -> LedgerSnapshot {
        match self {
            LmOracle::Local(_) => LedgerSnapshot::default(),
            LmOracle::Remote(probe) => probe.client.ledger.snapshot(),
        }
    }
}

/// Target-string or multi-target objective over a language-model oracle.
pub struct LmObjective {
    targets: Vec<TokenSeq>,
    oracle: LmOracle,
    proxy: Option<ToyLm>,
    vocab: Arc<Vocabulary>,
    queries: u64,
}

impl LmObjective {
    /// Single-target objective: make the oracle emit `target` verbatim.
    pub fn target_string(
        target: TokenSeq,
        oracle: LmOracle,
        proxy: Option<ToyLm>,
        vocab: Arc<Vocabulary>,
    ) -> LmObjective {
        LmObjective {
            targets: vec![target],
            oracle,
            proxy,
            vocab,
            queries: 0,
        }
    }

    /// Universal objective: average loss over several targets.
    pub fn universal(
        targets: Vec<TokenSeq>,
        oracle: LmOracle,
        proxy: Option<ToyLm>,
        vocab: Arc<Vocabulary>,
    ) -> Result<LmObjective> {
        if targets.is_empty() {
            return Err(crate::error::Error::EmptyInput(
                "universal objective targets",
            ));
        }
        Ok(LmObjective {
            targets,
            oracle,
            proxy,
            vocab,
            queries: 0,
        })
    }

    pub fn oracle_mut(&mut self) -> &mut LmOracle {
        &mut self.oracle
    }

    pub fn targets(&self) -> &[TokenSeq] {
        &self.targets
    }
}

impl AttackObjective for LmObjective {
    fn vocab_size(&self) -> u32 {
        self.vocab.size()
    }

    fn true_loss(
        &mut self,
        seq: &TokenSeq,
        stop_below: Option<f64>,
        parent: Option<&TokenSeq>,
    ) -> Result<LossOutcome> {
        // Candidates are canonicalized before true scoring so the oracle
        // only ever sees API-feasible tokenizations; the raw mutation stays
        // in the buffer.
        let prompt = self.vocab.canonicalize(seq)?;
        let parent_canon = match parent {
            Some(p) => Some(self.vocab.canonicalize(p)?),
            None => None,
        };
        if self.targets.len() == 1 {
            let target = self.targets[0].clone();
            self.queries += 1;
            let (logprob, short_circuited) = self.oracle.cumulative_logprob(
                &prompt,
                &target,
                stop_below.map(|loss| -loss),
                parent_canon.as_ref(),
            )?;
            return Ok(LossOutcome {
                loss: -logprob,
                short_circuited,
            });
        }

        // Universal loss: arithmetic mean over targets, stopping early once
        // the partial mean alone already exceeds the threshold (remaining
        // per-target losses are non-negative).
        let k = self.targets.len() as f64;
        let targets = self.targets.clone();
        let mut sum = 0.0;
        for (j, target) in targets.iter().enumerate() {
            self.queries += 1;
            let (logprob, _) =
                self.oracle
                    .cumulative_logprob(&prompt, target, None, parent_canon.as_ref())?;
            sum += -logprob;
            if let Some(threshold) = stop_below {
                if sum / k > threshold && j + 1 < targets.len() {
                    return Ok(LossOutcome {
                        loss: sum / k,
                        short_circuited: true,
                    });
                }
            }
        }
        Ok(LossOutcome::exact(sum / k))
    }

    fn has_proxy(&self) -> bool {
        self.proxy.is_some()
    }

    fn proxy_loss(&mut self, seq: &TokenSeq) -> Result<f64> {
        let proxy = self.proxy.as_ref().ok_or(crate::error::Error::EmptyInput(
            "objective has no proxy model",
        ))?;
        // Proxy scoring uses the raw mutation, not the canonical form.
        let mut sum = 0.0;
        for target in &self.targets {
            sum += -proxy.cumulative_logprob(seq, target);
        }
        Ok(sum / self.targets.len() as f64)
    }

    fn check_success(&mut self, seq: &TokenSeq) -> Result<bool> {
        let prompt = self.vocab.canonicalize(seq)?;
        let targets = self.targets.clone();
        for target in &targets {
            self.queries += 1;
            let generated = self.oracle.greedy_generate(&prompt, target.len())?;
            if &generated != target {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn queries(&self) -> u64 {
        self.queries
    }

    fn ledger(&self) -> LedgerSnapshot {
        self.oracle.ledger()
    }

    fn repeat_init(&self, m: usize) -> Option<TokenSeq> {
        if self.targets.len() == 1 {
            crate::engine::init_repeat(&self.targets[0], m).ok()
        } else {
            None
        }
    }
}

/// Scoring backend for moderation objectives.
pub enum ModerationOracle {
    Local {
        model: ModerationModel,
        requests: u64,
    },
    Remote(crate::client::ApiClient),
}

/// Sum-of-category-scores objective: craft a suffix that unflags the
/// payload(s). A single payload is the nonuniversal attack; several are
/// the universal one (mean loss over payloads).
pub struct ModerationObjective {
    payloads: Vec<String>,
    oracle: ModerationOracle,
    vocab: Arc<Vocabulary>,
    queries: u64,
}

/// Score sum and flag state for one text.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModScore {
    pub sum: f64,
    pub flagged: bool,
}

impl ModerationObjective {
    pub fn new(
        payloads: Vec<String>,
        oracle: ModerationOracle,
        vocab: Arc<Vocabulary>,
    ) -> Result<ModerationObjective> {
        if payloads.is_empty() {
            return Err(crate::error::Error::EmptyInput("moderation payloads"));
        }
        Ok(ModerationObjective {
            payloads,
            oracle,
            vocab,
            queries: 0,
        })
    }

    pub fn payloads(&self) -> &[String] {
        &self.payloads
    }

    /// Scores arbitrary texts through the oracle in batches of 32,
    /// counting one request per batch and one query per text.
    pub fn score_texts(&mut self, texts: &[String]) -> Result<Vec<ModScore>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(MAX_MODERATION_BATCH) {
            self.queries += chunk.len() as u64;
            match &mut self.oracle {
                ModerationOracle::Local { model, requests } => {
                    *requests += 1;
                    for scored in model.moderate(&self.vocab, chunk)? {
                        out.push(ModScore {
                            sum: scored.score_sum(),
                            flagged: scored.flagged(),
                        });
                    }
                }
                ModerationOracle::Remote(client) => {
                    for result in client.moderate(chunk)? {
                        out.push(ModScore {
                            sum: result.category_scores.values().sum(),
                            flagged: result.flagged,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    fn suffixed_texts(&self, seq: &TokenSeq) -> Result<Vec<String>> {
        let suffix = self.vocab.detokenize(seq)?;
        Ok(self
            .payloads
            .iter()
            .map(|p| format!("{p}{suffix}"))
            .collect())
    }
}

impl AttackObjective for ModerationObjective {
    fn vocab_size(&self) -> u32 {
        self.vocab.size()
    }

    // Moderation scores are cheap and batched, so there is no
    // short-circuit path here; `stop_below` is accepted and ignored.
    fn true_loss(
        &mut self,
        seq: &TokenSeq,
        _stop_below: Option<f64>,
        _parent: Option<&TokenSeq>,
    ) -> Result<LossOutcome> {
        let texts = self.suffixed_texts(seq)?;
        let scores = self.score_texts(&texts)?;
        let mean = scores.iter().map(|s| s.sum).sum::<f64>() / scores.len() as f64;
        Ok(LossOutcome::exact(mean))
    }

    fn has_proxy(&self) -> bool {
        false
    }

    fn proxy_loss(&mut self, _seq: &TokenSeq) -> Result<f64> {
        Err(crate::error::Error::EmptyInput(
            "moderation objectives have no proxy",
        ))
    }

    fn check_success(&mut self, seq: &TokenSeq) -> Result<bool> {
        let texts = self.suffixed_texts(seq)?;
        let scores = self.score_texts(&texts)?;
        Ok(scores.iter().all(|s| !s.flagged))
    }

    fn queries(&self) -> u64 {
        self.queries
    }

    fn ledger(&self) -> LedgerSnapshot {
        match &self.oracle {
            ModerationOracle::Local { requests, .. } => LedgerSnapshot {
                requests: *requests,
                ..LedgerSnapshot::default()
            },
            ModerationOracle::Remote(client) => client.ledger.snapshot(),
        }
    }

    fn repeat_init(&self, _m: usize) -> Option<TokenSeq> {
        None
    }
}
