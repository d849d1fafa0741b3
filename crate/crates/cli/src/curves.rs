//! Turns trace records into tab-separated curve tables: cumulative ASR
//! against spend and iterations, ASR by target length, and universal
//! holdout learning curves.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

use crate::suite::TraceRecord;

/// Writes the applicable curve tables under `out_dir` and returns the
/// paths written.
pub fn emit_curves(records: &[TraceRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        bail!("no trace records to summarize");
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    written.push(write_table(
        out_dir.join("asr_vs_cost.tsv"),
        "spend_usd\tsuccesses\tasr",
        asr_step_curve(records, |r| r.trace.ledger.spend_usd),
    )?);
    written.push(write_table(
        out_dir.join("asr_vs_queries.tsv"),
        "queries\tsuccesses\tasr",
        asr_step_curve(records, |r| r.trace.queries as f64),
    )?);
    written.push(write_table(
        out_dir.join("asr_vs_iterations.tsv"),
        "iteration\tsuccesses\tasr",
        asr_step_curve(records, |r| {
            r.trace.success_iteration.unwrap_or(r.trace.iterations_run) as f64
        }),
    )?);
    written.push(write_table(
        out_dir.join("asr_by_target_length.tsv"),
        "target_len\tcount\tsuccesses\tasr",
        length_buckets(records),
    )?);

    if records.iter().any(|r| r.universal.is_some()) {
        written.push(write_table(
            out_dir.join("universal_holdout.tsv"),
            "iteration\trequests\tholdout_asr",
            universal_points(records),
        )?);
    }
    Ok(written)
}

/// Cumulative success curve over a per-record cost measure: one row per
/// successful record, sorted by cost.
fn asr_step_curve(records: &[TraceRecord], cost: impl Fn(&TraceRecord) -> f64) -> Vec<String> {
    let total = records.len() as f64;
    let mut costs: Vec<f64> = records.iter().filter(|r| r.succeeded()).map(cost).collect();
    costs.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
    costs
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{c}\t{}\t{}", i + 1, (i + 1) as f64 / total))
        .collect()
}

/// Disjoint partition by exact target length; counts sum to the suite size.
fn length_buckets(records: &[TraceRecord]) -> Vec<String> {
    let mut lens: Vec<usize> = records.iter().map(|r| r.target_len).collect();
    lens.sort_unstable();
    lens.dedup();
    lens.into_iter()
        .map(|len| {
            let bucket: Vec<&TraceRecord> =
                records.iter().filter(|r| r.target_len == len).collect();
            let successes = bucket.iter().filter(|r| r.succeeded()).count();
            format!(
                "{len}\t{}\t{successes}\t{}",
                bucket.len(),
                successes as f64 / bucket.len() as f64
            )
        })
        .collect()
}

fn universal_points(records: &[TraceRecord]) -> Vec<String> {
    records
        .iter()
        .filter_map(|r| r.universal.as_ref())
        .flat_map(|u| {
            u.points
                .iter()
                .map(|p| format!("{}\t{}\t{}", p.iteration, p.requests, p.holdout_asr))
        })
        .collect()
}

fn write_table(path: PathBuf, header: &str, rows: Vec<String>) -> Result<PathBuf> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(&path, text)?;
    Ok(path)
}
