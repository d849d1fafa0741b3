//! Experiment driver: runs one attack per dataset target under the
//! configured budget and writes line-delimited trace records.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use gcq_core::client::ApiClient;
use gcq_core::cost::{CostLedger, Pricing};
use gcq_core::engine::{
    gcq_attack, greedy_query_only, position_first, AttackTrace, BudgetSpec, GcqConfig,
    InitStrategy, Outcome, VariantConfig,
};
use gcq_core::loss::{
    AttackObjective, LmObjective, LmOracle, ModerationObjective, ModerationOracle,
};
use gcq_core::moderation::ModerationModel;
use gcq_core::probe::ProbeSession;
use gcq_core::toylm::{ToyLm, ToyLmConfig};
use gcq_core::vocab::{TokenSeq, Vocabulary};
use gcq_core::wire::ApiEra;

use crate::config::{
    BudgetCfg, BudgetKindCfg, EngineKindCfg, EngineSpec, ExperimentConfig, InitCfg,
    ObjectiveKindCfg, OracleKindCfg, OracleSpec, ProxySpec,
};

/// Fully resolved engine configuration echoed into every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineEcho {
    Gcq(GcqConfig),
    Greedy(VariantConfig),
    PositionFirst(VariantConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalPoint {
    pub iteration: u64,
    pub requests: u64,
    pub holdout_asr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalCurve {
    pub train_size: usize,
    pub holdout_size: usize,
    pub points: Vec<UniversalPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    /// "main" or "rerun-doubled".
    pub phase: String,
    pub target_text: String,
    pub target_tokens: TokenSeq,
    pub target_len: usize,
    pub seed: u64,
    pub engine: EngineEcho,
    pub trace: AttackTrace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub universal: Option<UniversalCurve>,
}

impl TraceRecord {
    pub fn succeeded(&self) -> bool {
        self.trace.outcome == Outcome::Success
    }
}

fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn load_vocab(oracle: &OracleSpec) -> Result<Arc<Vocabulary>> {
    Ok(Arc::new(match &oracle.vocab {
        Some(path) => Vocabulary::load(path)
            .with_context(|| format!("loading vocabulary {}", path.display()))?,
        None => Vocabulary::seeded_default(13),
    }))
}

fn budget_spec(budget: &BudgetCfg, scale: f64) -> BudgetSpec {
    match budget.kind {
        BudgetKindCfg::Unlimited => BudgetSpec::Unlimited,
        BudgetKindCfg::Usd => BudgetSpec::Usd(budget.value * scale),
        BudgetKindCfg::Queries => BudgetSpec::Queries((budget.value * scale) as u64),
        BudgetKindCfg::Requests => BudgetSpec::Requests((budget.value * scale) as u64),
    }
}

fn ledger_for(budget: &BudgetCfg, scale: f64) -> CostLedger {
    let pricing = Pricing {
        prompt_per_1k: budget.price_prompt_per_1k,
        completion_per_1k: budget.price_completion_per_1k,
    };
    let cap = match budget.kind {
        BudgetKindCfg::Usd => Some(budget.value * scale),
        _ => None,
    };
    CostLedger::new(pricing, cap)
}

fn build_target_lm(oracle: &OracleSpec) -> Result<ToyLm> {
    let path = oracle
        .model_config
        .as_ref()
        .context("[oracle].model_config is required here")?;
    let cfg = ToyLmConfig::load(path)
        .with_context(|| format!("loading model config {}", path.display()))?;
    Ok(ToyLm::build(cfg)?)
}

fn build_proxy(oracle: &OracleSpec, proxy: &Option<ProxySpec>) -> Result<Option<ToyLm>> {
    let Some(spec) = proxy else { return Ok(None) };
    if let Some(path) = &spec.model_config {
        let cfg = ToyLmConfig::load(path)
            .with_context(|| format!("loading proxy model config {}", path.display()))?;
        return Ok(Some(ToyLm::build(cfg)?));
    }
    let base_path = oracle
        .model_config
        .as_ref()
        .context("overlap proxy needs oracle model")?;
    let base = ToyLmConfig::load(base_path)?;
    let seed = spec.seed.context("proxy seed")?;
    let overlap = spec.overlap.context("proxy overlap")?;
    Ok(Some(ToyLm::build_proxy(&base, seed, overlap)?))
}

fn lm_oracle(cfg: &ExperimentConfig, vocab: &Arc<Vocabulary>, scale: f64) -> Result<LmOracle> {
    match cfg.oracle.kind {
        OracleKindCfg::Local => Ok(LmOracle::Local(build_target_lm(&cfg.oracle)?)),
        OracleKindCfg::Mock => {
            let address = cfg.oracle.address.as_ref().expect("validated");
            let era: ApiEra = cfg.oracle.era.as_ref().expect("validated").parse()?;
            let client = ApiClient::new(
                address.clone(),
                Arc::clone(vocab),
                ledger_for(&cfg.budget, scale),
            );
            Ok(LmOracle::Remote(ProbeSession::new(client, era)))
        }
    }
}

fn engine_echo(spec: &EngineSpec, m: usize, seed: u64, budget: BudgetSpec) -> EngineEcho {
    let init = match spec.init {
        InitCfg::Repeat => InitStrategy::Repeat,
        InitCfg::Random => InitStrategy::Random,
    };
    match spec.kind {
        EngineKindCfg::Gcq => EngineEcho::Gcq(GcqConfig {
            m,
            iterations: spec.iterations,
            proxy_batch: spec.proxy_batch,
            query_batch: spec.query_batch,
            buffer_size: spec.buffer,
            init,
            budget,
            seed,
            short_circuit: spec.short_circuit,
        }),
        EngineKindCfg::Greedy => EngineEcho::Greedy(VariantConfig {
            l: m,
            batch: spec.batch,
            focused_batch: spec.focused_batch,
            iterations: spec.iterations,
            init,
            budget,
            seed,
            short_circuit: spec.short_circuit,
        }),
        EngineKindCfg::PositionFirst => EngineEcho::PositionFirst(VariantConfig {
            l: m,
            batch: spec.batch,
            focused_batch: spec.focused_batch,
            iterations: spec.iterations,
            init,
            budget,
            seed,
            short_circuit: spec.short_circuit,
        }),
    }
}

pub fn run_engine(
    objective: &mut dyn AttackObjective,
    vocab: &Vocabulary,
    echo: &EngineEcho,
) -> Result<AttackTrace> {
    Ok(match echo {
        EngineEcho::Gcq(c) => gcq_attack(objective, Some(vocab), c)?,
        EngineEcho::Greedy(c) => greedy_query_only(objective, Some(vocab), c)?,
        EngineEcho::PositionFirst(c) => position_first(objective, Some(vocab), c)?,
    })
}

fn read_dataset(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading dataset {}", path.display()))?;
    let lines: Vec<String> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.to_string())
        .collect();
    if lines.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    Ok(lines)
}

struct Pass<'a> {
    phase: &'a str,
    m: usize,
    /// Budget multiplier (2.0 for the doubled rerun).
    scale: f64,
}

fn run_lm_target(
    cfg: &ExperimentConfig,
    vocab: &Arc<Vocabulary>,
    proxy: &Option<ToyLm>,
    index: usize,
    text: &str,
    pass: &Pass,
) -> Result<TraceRecord> {
    let target = vocab
        .tokenize(text)
        .with_context(|| format!("tokenizing target {index}: {text:?}"))?;
    let oracle = lm_oracle(cfg, vocab, pass.scale)?;
    let mut objective =
        LmObjective::target_string(target.clone(), oracle, proxy.clone(), Arc::clone(vocab));
    let seed = mix64(
        cfg.seed,
        mix64(index as u64, if pass.phase == "main" { 0 } else { 1 }),
    );
    let echo = engine_echo(
        &cfg.engine,
        pass.m,
        seed,
        budget_spec(&cfg.budget, pass.scale),
    );
    let trace = run_engine(&mut objective, vocab, &echo)?;
    Ok(TraceRecord {
        index,
        phase: pass.phase.to_string(),
        target_text: text.to_string(),
        target_len: target.len(),
        target_tokens: target,
        seed,
        engine: echo,
        trace,
        universal: None,
    })
}

fn moderation_oracle(cfg: &ExperimentConfig, vocab: &Arc<Vocabulary>) -> Result<ModerationOracle> {
    match cfg.oracle.kind {
        OracleKindCfg::Local => Ok(ModerationOracle::Local {
            model: ModerationModel::seeded(
                cfg.oracle.moderation_seed,
                vocab.size(),
                cfg.oracle.moderation_categories,
            ),
            requests: 0,
        }),
        OracleKindCfg::Mock => {
            let address = cfg.oracle.address.as_ref().expect("validated");
            Ok(ModerationOracle::Remote(ApiClient::new(
                address.clone(),
                Arc::clone(vocab),
                ledger_for(&cfg.budget, 1.0),
            )))
        }
    }
}

fn run_moderation_target(
    cfg: &ExperimentConfig,
    vocab: &Arc<Vocabulary>,
    index: usize,
    text: &str,
) -> Result<TraceRecord> {
    let oracle = moderation_oracle(cfg, vocab)?;
    let mut objective =
        ModerationObjective::new(vec![text.to_string()], oracle, Arc::clone(vocab))?;
    let seed = mix64(cfg.seed, index as u64);
    let echo = engine_echo(
        &cfg.engine,
        cfg.engine.m,
        seed,
        budget_spec(&cfg.budget, 1.0),
    );
    let trace = run_engine(&mut objective, vocab, &echo)?;
    Ok(TraceRecord {
        index,
        phase: "main".to_string(),
        target_text: text.to_string(),
        target_len: 0,
        target_tokens: TokenSeq::default(),
        seed,
        engine: echo,
        trace,
        universal: None,
    })
}

fn run_universal_moderation(
    cfg: &ExperimentConfig,
    vocab: &Arc<Vocabulary>,
    lines: &[String],
) -> Result<TraceRecord> {
    let train_size = cfg.objective.train_size;
    if lines.len() <= train_size {
        bail!("universal mode needs more than {train_size} strings for a holdout split");
    }
    let mut shuffled: Vec<String> = lines.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Fisher-Yates so the split is a pure function of (dataset, seed).
    for i in (1..shuffled.len()).rev() {
        let j = rng.random_range(0..=i);
        shuffled.swap(i, j);
    }
    let (train, holdout) = shuffled.split_at(train_size);

    let model = ModerationModel::seeded(
        cfg.oracle.moderation_seed,
        vocab.size(),
        cfg.oracle.moderation_categories,
    );
    let mut objective = ModerationObjective::new(
        train.to_vec(),
        ModerationOracle::Local {
            model: model.clone(),
            requests: 0,
        },
        Arc::clone(vocab),
    )?;
    let seed = mix64(cfg.seed, 0);
    let echo = engine_echo(
        &cfg.engine,
        cfg.engine.m,
        seed,
        budget_spec(&cfg.budget, 1.0),
    );
    let trace = run_engine(&mut objective, vocab, &echo)?;

    // Holdout evaluation is free: it runs directly against the simulator
    // rather than through the counted request path.
    let mut points = Vec::new();
    for record in &trace.history {
        let Some(best_seq) = &record.best_seq else {
            continue;
        };
        let suffix = vocab.detokenize(best_seq)?;
        let unflagged = holdout
            .iter()
            .filter(|p| {
                let scored = model
                    .score(vocab, &format!("{p}{suffix}"))
                    .expect("scorable");
                !scored.flagged()
            })
            .count();
        points.push(UniversalPoint {
            iteration: record.iteration,
            requests: record.ledger.requests,
            holdout_asr: unflagged as f64 / holdout.len() as f64,
        });
    }
    Ok(TraceRecord {
        index: 0,
        phase: "main".to_string(),
        target_text: format!("universal suffix over {train_size} training strings"),
        target_len: 0,
        target_tokens: TokenSeq::default(),
        seed,
        engine: echo,
        trace,
        universal: Some(UniversalCurve {
            train_size,
            holdout_size: holdout.len(),
            points,
        }),
    })
}

/// Runs the configured suite and writes one JSON record per line to the
/// configured output path.
pub fn run_suite(cfg: &ExperimentConfig) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    let vocab = load_vocab(&cfg.oracle)?;
    let lines = read_dataset(&cfg.dataset)?;

    let mut records = Vec::new();
    match cfg.objective.kind {
        ObjectiveKindCfg::TargetString => {
            let proxy = build_proxy(&cfg.oracle, &cfg.proxy)?;
            for (index, text) in lines.iter().enumerate() {
                let pass = Pass {
                    phase: "main",
                    m: cfg.engine.m,
                    scale: 1.0,
                };
                records.push(run_lm_target(cfg, &vocab, &proxy, index, text, &pass)?);
            }
            let rerun = cfg
                .length_sweep
                .as_ref()
                .map(|s| s.rerun_doubled)
                .unwrap_or(false);
            if rerun {
                let failures: Vec<usize> = records
                    .iter()
                    .filter(|r| !r.succeeded())
                    .map(|r| r.index)
                    .collect();
                // Doubled prompt length, doubled budget.
                let pass = Pass {
                    phase: "rerun-doubled",
                    m: cfg.engine.m * 2,
                    scale: 2.0,
                };
                for index in failures {
                    records.push(run_lm_target(
                        cfg,
                        &vocab,
                        &proxy,
                        index,
                        &lines[index],
                        &pass,
                    )?);
                }
            }
        }
        ObjectiveKindCfg::Moderation => {
            for (index, text) in lines.iter().enumerate() {
                records.push(run_moderation_target(cfg, &vocab, index, text)?);
            }
        }
        ObjectiveKindCfg::UniversalModeration => {
            records.push(run_universal_moderation(cfg, &vocab, &lines)?);
        }
    }

    write_records(&records, &cfg.output)?;
    Ok(records)
}

pub fn write_records(records: &[TraceRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading trace records {}", path.display()))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(line)
            .with_context(|| format!("parsing record on line {}", lineno + 1))?;
        records.push(record);
    }
    Ok(records)
}
