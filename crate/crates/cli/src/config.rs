//! Experiment configuration files (TOML). Every knob is explicit in the
//! file or filled from a typed default that is echoed back into the
//! output records, so a trace never depends on hidden state.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// One target (or moderation payload) per line, plain text.
    pub dataset: PathBuf,
    /// Line-delimited trace records are written here.
    pub output: PathBuf,
    pub objective: ObjectiveSpec,
    pub engine: EngineSpec,
    pub oracle: OracleSpec,
    #[serde(default)]
    pub proxy: Option<ProxySpec>,
    #[serde(default)]
    pub budget: BudgetCfg,
    #[serde(default)]
    pub length_sweep: Option<LengthSweepCfg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKindCfg {
    TargetString,
    Moderation,
    UniversalModeration,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKindCfg,
    /// Training-set size for the universal moderation attack.
    #[serde(default = "default_train_size")]
    pub train_size: usize,
}

fn default_train_size() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKindCfg {
    Gcq,
    Greedy,
    PositionFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitCfg {
    Repeat,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSpec {
    pub kind: EngineKindCfg,
    /// Prompt length (gcq) or suffix length (variants / moderation).
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_iterations")]
    pub iterations: u64,
    #[serde(default = "d_proxy_batch")]
    pub proxy_batch: usize,
    #[serde(default = "d_query_batch")]
    pub query_batch: usize,
    #[serde(default = "d_buffer")]
    pub buffer: usize,
    #[serde(default = "d_init")]
    pub init: InitCfg,
    #[serde(default = "d_true")]
    pub short_circuit: bool,
    /// Greedy-variant batch size B.
    #[serde(default = "d_batch")]
    pub batch: usize,
    /// Position-first focused batch B'.
    #[serde(default = "d_focused")]
    pub focused_batch: usize,
}

fn d_m() -> usize {
    20
}
fn d_iterations() -> u64 {
    100
}
fn d_proxy_batch() -> usize {
    8192
}
fn d_query_batch() -> usize {
    32
}
fn d_buffer() -> usize {
    128
}
fn d_init() -> InitCfg {
    InitCfg::Repeat
}
fn d_true() -> bool {
    true
}
fn d_batch() -> usize {
    512
}
fn d_focused() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKindCfg {
    /// Remote mock endpoint over the wire protocol.
    Mock,
    /// In-process toy model.
    Local,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub kind: OracleKindCfg,
    /// Mock endpoint address, e.g. "127.0.0.1:9095".
    #[serde(default)]
    pub address: Option<String>,
    /// API era of the mock endpoint.
    #[serde(default)]
    pub era: Option<String>,
    /// Toy-model key-value config (required for local oracles, optional
    /// otherwise so overlap proxies can be built).
    #[serde(default)]
    pub model_config: Option<PathBuf>,
    /// Vocabulary file; the seeded default is used when omitted.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default)]
    pub moderation_seed: u64,
    #[serde(default = "d_categories")]
    pub moderation_categories: usize,
}

fn d_categories() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySpec {
    /// Explicit proxy model config, or...
    #[serde(default)]
    pub model_config: Option<PathBuf>,
    /// ...a proxy derived from the oracle's corpus with this seed and
    /// corpus-overlap fraction.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub overlap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetKindCfg {
    Unlimited,
    Usd,
    Queries,
    Requests,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetCfg {
    pub kind: BudgetKindCfg,
    #[serde(default)]
    pub value: f64,
    #[serde(default = "d_price_prompt")]
    pub price_prompt_per_1k: f64,
    #[serde(default = "d_price_completion")]
    pub price_completion_per_1k: f64,
}

fn d_price_prompt() -> f64 {
    0.0015
}
fn d_price_completion() -> f64 {
    0.002
}

impl Default for BudgetCfg {
    fn default() -> Self {
        BudgetCfg {
            kind: BudgetKindCfg::Unlimited,
            value: 0.0,
            price_prompt_per_1k: d_price_prompt(),
            price_completion_per_1k: d_price_completion(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthSweepCfg {
    /// Rerun failed targets with the prompt length and budget doubled.
    #[serde(default)]
    pub rerun_doubled: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading experiment config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing experiment config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.oracle.kind {
            OracleKindCfg::Mock => {
                if self.oracle.address.is_none() {
                    bail!("mock oracle requires [oracle].address");
                }
                if self.oracle.era.is_none() {
                    bail!("mock oracle requires [oracle].era");
                }
            }
            OracleKindCfg::Local => {
                if self.objective.kind == ObjectiveKindCfg::TargetString
                    && self.oracle.model_config.is_none()
                {
                    bail!("local oracle requires [oracle].model_config");
                }
            }
        }
        if self.objective.kind == ObjectiveKindCfg::UniversalModeration
            && self.oracle.kind != OracleKindCfg::Local
        {
            bail!("universal-moderation runs against the local moderation simulator");
        }
        if let Some(proxy) = &self.proxy {
            let by_file = proxy.model_config.is_some();
            let by_overlap = proxy.seed.is_some() && proxy.overlap.is_some();
            if by_file == by_overlap {
                bail!("[proxy] needs either model_config or both seed and overlap");
            }
            if by_overlap && self.oracle.model_config.is_none() {
                bail!("[proxy] with overlap requires [oracle].model_config as the base corpus");
            }
        }
        if self.objective.kind == ObjectiveKindCfg::TargetString
            && self.engine.kind == EngineKindCfg::Gcq
            && self.proxy.is_none()
        {
            // Allowed (proxy-free GCQ), but repeat init still needs a target,
            // which target-string objectives always have.
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
dataset = "targets.txt"
output = "out/traces.jsonl"

[objective]
kind = "target-string"

[engine]
kind = "gcq"
m = 8

[oracle]
kind = "local"
model_config = "model.kv"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.engine.m, 8);
        assert_eq!(cfg.engine.query_batch, 32);
        assert_eq!(cfg.engine.buffer, 128);
        assert!(matches!(cfg.budget.kind, BudgetKindCfg::Unlimited));
    }

    #[test]
    fn mock_requires_address_and_era() {
        let text = MINIMAL.replace(
            "kind = \"local\"\nmodel_config = \"model.kv\"",
            "kind = \"mock\"",
        );
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = format!("{MINIMAL}\nbogus = 1\n");
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(
            serde_json::to_string(&cfg).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
    }
}
