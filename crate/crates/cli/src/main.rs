use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gcq_cli::config::ExperimentConfig;
use gcq_cli::curves::emit_curves;
use gcq_cli::suite::{load_records, run_suite};
use gcq_cli::targets::generate_targets;
use gcq_core::moderation::ModerationModel;
use gcq_core::server::{spawn, ServerState};
use gcq_core::toylm::{ToyLm, ToyLmConfig};
use gcq_core::vocab::Vocabulary;
use gcq_core::wire::{ApiEra, NoiseConfig};

#[derive(Parser)]
#[command(
    name = "gcq",
    about = "Query-based adversarial prompt optimization against a mock completions API",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the mock completions + moderations endpoint.
    ServeMock {
        /// API era: prompt-logprobs | biased-topk | unbiased-topk.
        #[arg(long)]
        era: String,
        /// Toy-model key-value config file; built-in defaults when omitted.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Logit noise scale; 0 disables noise.
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        port: u16,
        /// Server seed (noise stream and moderation model).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Vocabulary file; the seeded default 64-token vocabulary when
        /// omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        moderation_categories: usize,
    },
    /// Run an attack suite from an experiment config file.
    Attack {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize trace records into tab-separated curve tables.
    Curves {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic target dataset, one string per line.
    GenTargets {
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        min_len: usize,
        #[arg(long, default_value_t = 8)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the seeded default vocabulary to a file.
    GenVocab {
        #[arg(long, default_value_t = 13)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a toy-model config file.
    GenModel {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        n: u32,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long, default_value_t = 0.9)]
        lambda: f64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        #[arg(long, default_value_t = 100_000)]
        corpus_len: usize,
        #[arg(long, default_value_t = 8)]
        states: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_or_default_vocab(path: &Option<PathBuf>) -> Result<Vocabulary> {
    Ok(match path {
        Some(p) => Vocabulary::load(p).with_context(|| format!("loading vocab {}", p.display()))?,
        None => Vocabulary::seeded_default(13),
    })
}

fn load_or_default_model(path: &Option<PathBuf>) -> Result<ToyLm> {
    let cfg = match path {
        Some(p) => {
            ToyLmConfig::load(p).with_context(|| format!("loading model config {}", p.display()))?
        }
        None => ToyLmConfig::default(),
    };
    Ok(ToyLm::build(cfg)?)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::ServeMock {
            era,
            model_config,
            noise_sigma,
            port,
            seed,
            vocab,
            moderation_categories,
        } => {
            let era: ApiEra = era.parse()?;
            let vocab = load_or_default_vocab(&vocab)?;
            let lm = load_or_default_model(&model_config)?;
            if lm.vocab_size() != vocab.size() {
                bail!(
                    "model vocab size {} does not match vocabulary size {}; pass --vocab",
                    lm.vocab_size(),
                    vocab.size()
                );
            }
            let moderation = ModerationModel::seeded(seed, vocab.size(), moderation_categories);
            let noise = NoiseConfig {
                enabled: noise_sigma > 0.0,
                sigma: noise_sigma,
                seed,
            };
            let state = ServerState::new(era, lm, vocab, moderation, noise)?;
            let handle = spawn(&format!("127.0.0.1:{port}"), state)?;
            println!("listening on {}", handle.addr());
            loop {
                std::thread::park();
            }
        }
        Command::Attack { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let records = run_suite(&cfg)?;
            let successes = records.iter().filter(|r| r.succeeded()).count();
            let spend: f64 = records.iter().map(|r| r.trace.ledger.spend_usd).sum();
            let queries: u64 = records.iter().map(|r| r.trace.queries).sum();
            println!(
                "{} records -> {} ({} succeeded, {:.4} USD, {} queries)",
                records.len(),
                cfg.output.display(),
                successes,
                spend,
                queries
            );
        }
        Command::Curves { input, out } => {
            let records = load_records(&input)?;
            let written = emit_curves(&records, &out)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
        Command::GenTargets {
            count,
            min_len,
            max_len,
            seed,
            model_config,
            vocab,
            out,
        } => {
            let vocab = load_or_default_vocab(&vocab)?;
            let lm = load_or_default_model(&model_config)?;
            let targets = generate_targets(&vocab, &lm, count, min_len, max_len, seed)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&out, targets.join("\n") + "\n")?;
            println!("wrote {} targets to {}", targets.len(), out.display());
        }
        Command::GenVocab { seed, out } => {
            Vocabulary::seeded_default(seed).save(&out)?;
            println!("wrote vocabulary to {}", out.display());
        }
        Command::GenModel {
            seed,
            n,
            order,
            lambda,
            alpha,
            beta,
            corpus_len,
            states,
            out,
        } => {
            let cfg = ToyLmConfig {
                seed,
                n,
                order,
                lambda,
                alpha,
                beta,
                corpus_len,
                states,
            };
            cfg.validate()?;
            cfg.save(&out)?;
            println!("wrote model config to {}", out.display());
        }
    }
    Ok(())
}
