//! The optimizers: buffered best-first search over single-token mutations
//! (GCQ), the purely greedy query-only baseline, the position-first
//! variant, target-repetition initialization and the nondeterminism
//! re-evaluation harness.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{Candidate, CandidateBuffer};
use crate::cost::LedgerSnapshot;
use crate::error::{Error, Result};
use crate::loss::{AttackObjective, LmOracle};
use crate::vocab::{TokenId, TokenSeq, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Repeat the target as many times as the sequence length allows,
    /// truncating on the left.
    Repeat,
    /// Uniform samples from the token space.
    Random,
    /// A caller-supplied starting sequence.
    Given(TokenSeq),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetSpec {
    #[default]
    Unlimited,
    /// Cap on loss evaluations plus success checks.
    Queries(u64),
    /// Cap on API requests (the moderation cost metric).
    Requests(u64),
    /// Currency cap; enforced by the client ledger, which refuses
    /// requests past the budget.
    Usd(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcqConfig {
    /// Prompt length in tokens.
    pub m: usize,
    /// Maximum mutation iterations.
    pub iterations: u64,
    /// Neighbors sampled per iteration and filtered by the proxy.
    pub proxy_batch: usize,
    /// Candidates promoted to true-loss evaluation per iteration.
    pub query_batch: usize,
    pub buffer_size: usize,
    pub init: InitStrategy,
    pub budget: BudgetSpec,
    pub seed: u64,
    pub short_circuit: bool,
}

impl Default for GcqConfig {
    fn default() -> Self {
        GcqConfig {
            m: 20,
            iterations: 100,
            proxy_batch: 8192,
            query_batch: 32,
            buffer_size: 128,
            init: InitStrategy::Repeat,
            budget: BudgetSpec::Unlimited,
            seed: 0,
            short_circuit: true,
        }
    }
}

impl GcqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::InvalidConfig(
                "prompt length m must be at least 1".into(),
            ));
        }
        if self.buffer_size < 1 {
            return Err(Error::InvalidConfig(
                "buffer size must be at least 1".into(),
            ));
        }
        if self.query_batch < 1 || self.query_batch > self.proxy_batch {
            return Err(Error::InvalidConfig(
                "query batch must satisfy 1 <= b_q <= b_p".into(),
            ));
        }
        if let InitStrategy::Given(seq) = &self.init {
            if seq.len() != self.m {
                return Err(Error::InvalidConfig(format!(
                    "given init has length {}, expected m = {}",
                    seq.len(),
                    self.m
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    /// Suffix length.
    pub l: usize,
    /// Loss queries per iteration for the greedy baseline.
    pub batch: usize,
    /// Focused-phase queries for the position-first variant (B').
    pub focused_batch: usize,
    pub iterations: u64,
    pub init: InitStrategy,
    pub budget: BudgetSpec,
    pub seed: u64,
    pub short_circuit: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            l: 20,
            batch: 512,
            // B' << B; an eighth of the baseline batch by default.
            focused_batch: 64,
            iterations: 500,
            init: InitStrategy::Random,
            budget: BudgetSpec::Unlimited,
            seed: 0,
            short_circuit: true,
        }
    }
}

impl VariantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l < 1 {
            return Err(Error::InvalidConfig(
                "suffix length l must be at least 1".into(),
            ));
        }
        if self.batch < 1 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        if self.focused_batch > self.batch {
            return Err(Error::InvalidConfig(
                "focused batch B' must not exceed batch B".into(),
            ));
        }
        if let InitStrategy::Given(seq) = &self.init {
            if seq.len() != self.l {
                return Err(Error::InvalidConfig(format!(
                    "given init has length {}, expected l = {}",
                    seq.len(),
                    self.l
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    BudgetExhausted,
    IterationsExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub best_loss: Option<f64>,
    pub worst_loss: Option<f64>,
    /// Best candidate (raw form) at the end of the iteration; feeds
    /// holdout evaluation curves.
    pub best_seq: Option<TokenSeq>,
    pub queries: u64,
    pub ledger: LedgerSnapshot,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub outcome: Outcome,
    /// Canonicalized final prompt (the API-feasible form).
    pub final_prompt: TokenSeq,
    pub final_loss: Option<f64>,
    pub iterations_run: u64,
    pub queries: u64,
    pub ledger: LedgerSnapshot,
    pub success_iteration: Option<u64>,
    pub history: Vec<IterationRecord>,
    /// Accept/reject decision for every true-scored candidate, in scoring
    /// order (used by the short-circuit transparency check).
    pub decisions: Vec<bool>,
    /// Buffer contents at exit, best first.
    pub final_buffer: Vec<Candidate>,
}

/// The last `m` tokens of enough concatenated copies of `target`,
/// truncated on the left.
pub fn init_repeat(target: &TokenSeq, m: usize) -> Result<TokenSeq> {
    if target.is_empty() {
        return Err(Error::EmptyInput("repeat-init target"));
    }
    if m < 1 {
        return Err(Error::InvalidConfig(
            "prompt length m must be at least 1".into(),
        ));
    }
    let copies = m.div_ceil(target.len());
    let mut ids = Vec::with_capacity(copies * target.len());
    for _ in 0..copies {
        ids.extend_from_slice(target.ids());
    }
    Ok(TokenSeq::new(ids.split_off(ids.len() - m)))
}

fn uniform_seq(rng: &mut ChaCha8Rng, len: usize, n: u32) -> TokenSeq {
    (0..len).map(|_| rng.random_range(0..n)).collect()
}

/// Single-token mutation at a uniform position; the identity replacement
/// is resampled once to avoid wasting a query on a no-op.
fn mutate(rng: &mut ChaCha8Rng, seq: &TokenSeq, n: u32) -> TokenSeq {
    let pos = rng.random_range(0..seq.len());
    mutate_at(rng, seq, pos, n)
}

fn mutate_at(rng: &mut ChaCha8Rng, seq: &TokenSeq, pos: usize, n: u32) -> TokenSeq {
    let mut ids = seq.ids().to_vec();
    let mut tok: TokenId = rng.random_range(0..n);
    if tok == ids[pos] {
        tok = rng.random_range(0..n);
    }
    ids[pos] = tok;
    TokenSeq::new(ids)
}

/// Distinguishes budget exhaustion (a clean trace outcome) from hard
/// failures.
fn classify<T>(result: Result<T>) -> Result<std::result::Result<T, ()>> {
    match result {
        Ok(v) => Ok(Ok(v)),
        Err(Error::BudgetExceeded { .. }) | Err(Error::QueryBudgetExceeded { .. }) => Ok(Err(())),
        Err(e) => Err(e),
    }
}

fn budget_remaining(objective: &dyn AttackObjective, budget: &BudgetSpec) -> bool {
    match budget {
        BudgetSpec::Unlimited | BudgetSpec::Usd(_) => true,
        BudgetSpec::Queries(limit) => objective.queries() < *limit,
        BudgetSpec::Requests(limit) => objective.ledger().requests < *limit,
    }
}

struct RunState {
    history: Vec<IterationRecord>,
    decisions: Vec<bool>,
    checked: HashSet<u64>,
    success_iteration: Option<u64>,
    success_seq: Option<TokenSeq>,
}

impl RunState {
    fn new() -> Self {
        RunState {
            history: Vec::new(),
            decisions: Vec::new(),
            checked: HashSet::new(),
            success_iteration: None,
            success_seq: None,
        }
    }

    fn record(
        &mut self,
        iteration: u64,
        best: Option<f64>,
        worst: Option<f64>,
        best_seq: Option<TokenSeq>,
        objective: &dyn AttackObjective,
    ) {
        self.history.push(IterationRecord {
            iteration,
            best_loss: best,
            worst_loss: worst,
            best_seq,
            queries: objective.queries(),
            ledger: objective.ledger(),
            success: self.success_iteration.is_some(),
        });
    }

    /// Runs a (deduplicated) success check; returns Err(()) on budget.
    fn try_check(
        &mut self,
        objective: &mut dyn AttackObjective,
        vocab_hint: Option<&Vocabulary>,
        seq: &TokenSeq,
        iteration: u64,
    ) -> Result<std::result::Result<bool, ()>> {
        let key = match vocab_hint {
            Some(v) => v.canonicalize(seq)?.content_hash(),
            None => seq.content_hash(),
        };
        if !self.checked.insert(key) {
            return Ok(Ok(false));
        }
        match classify(objective.check_success(seq))? {
            Err(()) => Ok(Err(())),
            Ok(false) => Ok(Ok(false)),
            Ok(true) => {
                self.success_iteration = Some(iteration);
                self.success_seq = Some(seq.clone());
                Ok(Ok(true))
            }
        }
    }
}

fn finalize(
    outcome: Outcome,
    state: RunState,
    objective: &dyn AttackObjective,
    vocab: Option<&Vocabulary>,
    best: Option<Candidate>,
    buffer_snapshot: Vec<Candidate>,
    iterations_run: u64,
) -> Result<AttackTrace> {
    let (raw_final, final_loss) = match (&state.success_seq, &best) {
        (Some(seq), _) => {
            let loss = best.as_ref().filter(|c| &c.seq == seq).map(|c| c.loss);
            (seq.clone(), loss)
        }
        (None, Some(c)) => (c.seq.clone(), Some(c.loss)),
        (None, None) => (TokenSeq::default(), None),
    };
    let final_prompt = match vocab {
        Some(v) if !raw_final.is_empty() => v.canonicalize(&raw_final)?,
        _ => raw_final,
    };
    Ok(AttackTrace {
        outcome,
        final_prompt,
        final_loss,
        iterations_run,
        queries: objective.queries(),
        ledger: objective.ledger(),
        success_iteration: state.success_iteration,
        history: state.history,
        decisions: state.decisions,
        final_buffer: buffer_snapshot,
    })
}

/// Buffered best-first search: each iteration expands the buffer's best
/// node by sampling `proxy_batch` single-token mutations, promotes the
/// `query_batch` best under the proxy loss (or samples `query_batch`
/// directly when no proxy is configured), true-scores them with
/// short-circuiting at the buffer's worst loss, and inserts survivors.
/// Success is checked whenever a new global best appears.
pub fn gcq_attack(
    objective: &mut dyn AttackObjective,
    vocab: Option<&Vocabulary>,
    cfg: &GcqConfig,
) -> Result<AttackTrace> {
    cfg.validate()?;
    let n = objective.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut buffer = CandidateBuffer::new(cfg.buffer_size);
    let mut state = RunState::new();

    let primary = match &cfg.init {
        InitStrategy::Repeat => Some(objective.repeat_init(cfg.m).ok_or_else(|| {
            Error::InvalidConfig("repeat init requires a single-target objective".into())
        })?),
        InitStrategy::Given(seq) => Some(seq.clone()),
        InitStrategy::Random => None,
    };
    let mut seeds: Vec<TokenSeq> = Vec::with_capacity(cfg.buffer_size);
    if let Some(p) = &primary {
        seeds.push(p.clone());
    }
    while seeds.len() < cfg.buffer_size {
        seeds.push(uniform_seq(&mut rng, cfg.m, n));
    }

    // A designed init prompt gets its success check before any scoring is
    // paid for; an immediate hit costs exactly one generation.
    if let Some(p) = primary.clone() {
        if !budget_remaining(objective, &cfg.budget) {
            state.record(0, None, None, Some(p.clone()), objective);
            return finalize(
                Outcome::BudgetExhausted,
                state,
                objective,
                vocab,
                None,
                vec![],
                0,
            );
        }
        match state.try_check(objective, vocab, &p, 0)? {
            Err(()) => {
                state.record(0, None, None, Some(p.clone()), objective);
                return finalize(
                    Outcome::BudgetExhausted,
                    state,
                    objective,
                    vocab,
                    None,
                    vec![],
                    0,
                );
            }
            Ok(true) => {
                state.record(0, None, None, Some(p.clone()), objective);
                return finalize(Outcome::Success, state, objective, vocab, None, vec![], 0);
            }
            Ok(false) => {}
        }
    }

    let mut global_best: Option<f64> = None;
    let mut outcome = Outcome::IterationsExhausted;
    let mut iterations_run = 0u64;

    // Initial buffer scoring. The buffer is below capacity throughout, so
    // every candidate is accepted and scored exactly.
    'init: {
        for seed in &seeds {
            if !budget_remaining(objective, &cfg.budget) {
                outcome = Outcome::BudgetExhausted;
                break 'init;
            }
            match classify(objective.true_loss(seed, None, None))? {
                Err(()) => {
                    outcome = Outcome::BudgetExhausted;
                    break 'init;
                }
                Ok(out) => {
                    let accepted = buffer.try_insert(Candidate::new(seed.clone(), out.loss));
                    state.decisions.push(accepted);
                }
            }
        }
    }

    if outcome != Outcome::BudgetExhausted {
        if let Ok(best) = buffer.best() {
            let (seq, loss) = (best.seq.clone(), best.loss);
            global_best = Some(loss);
            match state.try_check(objective, vocab, &seq, 0)? {
                Err(()) => outcome = Outcome::BudgetExhausted,
                Ok(true) => outcome = Outcome::Success,
                Ok(false) => {}
            }
        }
    }
    state.record(
        0,
        buffer.best_loss().ok(),
        buffer.worst_loss().ok(),
        buffer.best().ok().map(|c| c.seq.clone()),
        objective,
    );

    if outcome == Outcome::IterationsExhausted {
        'iterations: for iteration in 1..=cfg.iterations {
            iterations_run = iteration;
            if !budget_remaining(objective, &cfg.budget) {
                outcome = Outcome::BudgetExhausted;
                break;
            }
            let best_seq = buffer.best().expect("buffer seeded").seq.clone();

            let selected: Vec<TokenSeq> = if objective.has_proxy() {
                let mut cands = Vec::with_capacity(cfg.proxy_batch);
                for _ in 0..cfg.proxy_batch {
                    cands.push(mutate(&mut rng, &best_seq, n));
                }
                let mut scored: Vec<(f64, usize)> = Vec::with_capacity(cands.len());
                for (i, c) in cands.iter().enumerate() {
                    scored.push((objective.proxy_loss(c)?, i));
                }
                scored.sort_by(|a, b| a.partial_cmp(b).expect("finite proxy losses"));
                scored
                    .into_iter()
                    .take(cfg.query_batch)
                    .map(|(_, i)| cands[i].clone())
                    .collect()
            } else {
                (0..cfg.query_batch)
                    .map(|_| mutate(&mut rng, &best_seq, n))
                    .collect()
            };

            for cand in selected {
                if !budget_remaining(objective, &cfg.budget) {
                    outcome = Outcome::BudgetExhausted;
                    break 'iterations;
                }
                let stop = if cfg.short_circuit && buffer.is_full() {
                    Some(buffer.worst_loss().expect("full buffer"))
                } else {
                    None
                };
                let out = match classify(objective.true_loss(&cand, stop, Some(&best_seq)))? {
                    Err(()) => {
                        outcome = Outcome::BudgetExhausted;
                        break 'iterations;
                    }
                    Ok(out) => out,
                };
                // A short-circuited loss already exceeds the buffer's worst,
                // so the insert below rejects it without storing the bound.
                let accepted = buffer.try_insert(Candidate::new(cand.clone(), out.loss));
                state.decisions.push(accepted);
                if accepted && global_best.is_none_or(|g| out.loss < g) {
                    global_best = Some(out.loss);
                    match state.try_check(objective, vocab, &cand, iteration)? {
                        Err(()) => {
                            outcome = Outcome::BudgetExhausted;
                            break 'iterations;
                        }
                        Ok(true) => {
                            outcome = Outcome::Success;
                            break 'iterations;
                        }
                        Ok(false) => {}
                    }
                }
            }
            state.record(
                iteration,
                buffer.best_loss().ok(),
                buffer.worst_loss().ok(),
                buffer.best().ok().map(|c| c.seq.clone()),
                objective,
            );
        }
    }

    if state.history.last().map(|r| r.iteration) != Some(iterations_run) {
        state.record(
            iterations_run,
            buffer.best_loss().ok(),
            buffer.worst_loss().ok(),
            buffer.best().ok().map(|c| c.seq.clone()),
            objective,
        );
    }
    let best = buffer.best().ok().cloned();
    let snapshot = buffer.sorted_snapshot();
    finalize(
        outcome,
        state,
        objective,
        vocab,
        best,
        snapshot,
        iterations_run,
    )
}

/// Purely greedy baseline: `batch` uniform single-token mutations per
/// iteration, adopting the best only when it improves the incumbent. When
/// the batch covers the whole coordinate neighborhood, the neighborhood is
/// enumerated first and the remainder sampled, so one iteration performs a
/// full coordinate-descent step at the same query count.
pub fn greedy_query_only(
    objective: &mut dyn AttackObjective,
    vocab: Option<&Vocabulary>,
    cfg: &VariantConfig,
) -> Result<AttackTrace> {
    run_variant(objective, vocab, cfg, VariantKind::Greedy)
}

/// Position-first variant: one probe replacement per position, then
/// `focused_batch` replacements at the position whose probe reduced the
/// loss the most (ties to the lowest index). Exactly `l + B'` loss queries
/// per iteration.
pub fn position_first(
    objective: &mut dyn AttackObjective,
    vocab: Option<&Vocabulary>,
    cfg: &VariantConfig,
) -> Result<AttackTrace> {
    run_variant(objective, vocab, cfg, VariantKind::PositionFirst)
}

#[derive(PartialEq, Clone, Copy)]
enum VariantKind {
    Greedy,
    PositionFirst,
}

fn run_variant(
    objective: &mut dyn AttackObjective,
    vocab: Option<&Vocabulary>,
    cfg: &VariantConfig,
    kind: VariantKind,
) -> Result<AttackTrace> {
    cfg.validate()?;
    let n = objective.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = RunState::new();

    let mut incumbent = match &cfg.init {
        InitStrategy::Repeat => objective.repeat_init(cfg.l).ok_or_else(|| {
            Error::InvalidConfig("repeat init requires a single-target objective".into())
        })?,
        InitStrategy::Given(seq) => seq.clone(),
        InitStrategy::Random => uniform_seq(&mut rng, cfg.l, n),
    };
    // The incumbent starts unscored; the first improving batch candidate
    // adopts unconditionally, which keeps the per-iteration query count at
    // exactly the batch size.
    let mut incumbent_loss: Option<f64> = None;

    let mut outcome = Outcome::IterationsExhausted;
    let mut iterations_run = 0u64;

    if !budget_remaining(objective, &cfg.budget) {
        outcome = Outcome::BudgetExhausted;
    } else {
        match state.try_check(objective, vocab, &incumbent, 0)? {
            Err(()) => outcome = Outcome::BudgetExhausted,
            Ok(true) => outcome = Outcome::Success,
            Ok(false) => {}
        }
    }
    state.record(
        0,
        incumbent_loss,
        incumbent_loss,
        Some(incumbent.clone()),
        objective,
    );

    if outcome == Outcome::IterationsExhausted {
        'iterations: for iteration in 1..=cfg.iterations {
            iterations_run = iteration;
            let mut batch_best: Option<(f64, TokenSeq)> = None;
            let eval = |objective: &mut dyn AttackObjective,
                        cand: &TokenSeq,
                        threshold: Option<f64>|
             -> Result<std::result::Result<f64, ()>> {
                if !budget_remaining(objective, &cfg.budget) {
                    return Ok(Err(()));
                }
                match classify(objective.true_loss(cand, threshold, Some(&incumbent)))? {
                    Err(()) => Ok(Err(())),
                    Ok(out) => Ok(Ok(out.loss)),
                }
            };

            match kind {
                VariantKind::Greedy => {
                    let neighborhood = cfg.l * (n as usize - 1);
                    let mut cands: Vec<TokenSeq> = Vec::with_capacity(cfg.batch);
                    if cfg.batch >= neighborhood {
                        for pos in 0..cfg.l {
                            let current = incumbent.ids()[pos];
                            for tok in 0..n {
                                if tok != current {
                                    let mut ids = incumbent.ids().to_vec();
                                    ids[pos] = tok;
                                    cands.push(TokenSeq::new(ids));
                                }
                            }
                        }
                        while cands.len() < cfg.batch {
                            cands.push(mutate(&mut rng, &incumbent, n));
                        }
                    } else {
                        for _ in 0..cfg.batch {
                            cands.push(mutate(&mut rng, &incumbent, n));
                        }
                    }
                    for cand in cands {
                        let threshold = if cfg.short_circuit {
                            match (incumbent_loss, batch_best.as_ref().map(|b| b.0)) {
                                (Some(a), Some(b)) => Some(a.min(b)),
                                (Some(a), None) => Some(a),
                                (None, Some(b)) => Some(b),
                                (None, None) => None,
                            }
                        } else {
                            None
                        };
                        match eval(objective, &cand, threshold)? {
                            Err(()) => {
                                outcome = Outcome::BudgetExhausted;
                                break 'iterations;
                            }
                            Ok(loss) => {
                                if batch_best.as_ref().is_none_or(|(b, _)| loss < *b) {
                                    batch_best = Some((loss, cand));
                                }
                            }
                        }
                    }
                }
                VariantKind::PositionFirst => {
                    // Probe phase: one replacement per position; the
                    // selection compares probe losses, so they short-circuit
                    // only against the incumbent.
                    let mut probe_best: Option<(f64, usize)> = None;
                    for pos in 0..cfg.l {
                        let cand = mutate_at(&mut rng, &incumbent, pos, n);
                        let threshold = if cfg.short_circuit {
                            incumbent_loss
                        } else {
                            None
                        };
                        match eval(objective, &cand, threshold)? {
                            Err(()) => {
                                outcome = Outcome::BudgetExhausted;
                                break 'iterations;
                            }
                            Ok(loss) => {
                                if probe_best.as_ref().is_none_or(|(b, _)| loss < *b) {
                                    probe_best = Some((loss, pos));
                                }
                                if batch_best.as_ref().is_none_or(|(b, _)| loss < *b) {
                                    batch_best = Some((loss, cand));
                                }
                            }
                        }
                    }
                    let focus = probe_best.map(|(_, pos)| pos).unwrap_or(0);
                    for _ in 0..cfg.focused_batch {
                        let cand = mutate_at(&mut rng, &incumbent, focus, n);
                        let threshold = if cfg.short_circuit {
                            match (incumbent_loss, batch_best.as_ref().map(|b| b.0)) {
                                (Some(a), Some(b)) => Some(a.min(b)),
                                (Some(a), None) => Some(a),
                                (None, Some(b)) => Some(b),
                                (None, None) => None,
                            }
                        } else {
                            None
                        };
                        match eval(objective, &cand, threshold)? {
                            Err(()) => {
                                outcome = Outcome::BudgetExhausted;
                                break 'iterations;
                            }
                            Ok(loss) => {
                                if batch_best.as_ref().is_none_or(|(b, _)| loss < *b) {
                                    batch_best = Some((loss, cand));
                                }
                            }
                        }
                    }
                }
            }

            if let Some((loss, cand)) = batch_best {
                if incumbent_loss.is_none_or(|inc| loss < inc) {
                    incumbent = cand;
                    incumbent_loss = Some(loss);
                    match state.try_check(objective, vocab, &incumbent, iteration)? {
                        Err(()) => {
                            outcome = Outcome::BudgetExhausted;
                            break 'iterations;
                        }
                        Ok(true) => {
                            outcome = Outcome::Success;
                            break 'iterations;
                        }
                        Ok(false) => {}
                    }
                }
            }
            state.record(
                iteration,
                incumbent_loss,
                incumbent_loss,
                Some(incumbent.clone()),
                objective,
            );
        }
    }

    if state.history.last().map(|r| r.iteration) != Some(iterations_run) {
        state.record(
            iterations_run,
            incumbent_loss,
            incumbent_loss,
            Some(incumbent.clone()),
            objective,
        );
    }
    let best = incumbent_loss.map(|loss| Candidate::new(incumbent.clone(), loss));
    let snapshot = best.clone().into_iter().collect();
    finalize(
        outcome,
        state,
        objective,
        vocab,
        best,
        snapshot,
        iterations_run,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReevalReport {
    pub successes: u64,
    pub total: u64,
    pub rate: f64,
}

/// Re-runs the success check once for each solved (prompt, target) pair
/// and reports the fraction that still succeeds.
pub fn reevaluate(
    oracle: &mut LmOracle,
    vocab: &Vocabulary,
    solutions: &[(TokenSeq, TokenSeq)],
) -> Result<ReevalReport> {
    if solutions.is_empty() {
        return Err(Error::EmptyInput("reevaluation solutions"));
    }
    let mut successes = 0u64;
    for (prompt, target) in solutions {
        let canonical = vocab.canonicalize(prompt)?;
        let generated = oracle_greedy(oracle, &canonical, target.len())?;
        if &generated == target {
            successes += 1;
        }
    }
    Ok(ReevalReport {
        successes,
        total: solutions.len() as u64,
        rate: successes as f64 / solutions.len() as f64,
    })
}

fn oracle_greedy(oracle: &mut LmOracle, prompt: &TokenSeq, n_tokens: usize) -> Result<TokenSeq> {
    match oracle {
        LmOracle::Local(lm) => Ok(lm.greedy_generate(prompt, n_tokens)),
        LmOracle::Remote(probe) => {
            let req = crate::wire::CompletionRequest::from_tokens(prompt.clone(), n_tokens as u32);
            let resp = probe.client.send(&req)?;
            Ok(TokenSeq::new(resp.tokens))
        }
    }
}
