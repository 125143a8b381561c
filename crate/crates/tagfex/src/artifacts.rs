//! Files emitted by a run.
//!
//! Matrices (`attn_t{task}_e{epoch}.txt`, `cka_t{task}.txt`) are text: a
//! `rows cols` header line followed by one line per row. Floats use Rust's
//! shortest round-trip formatting, so files parse back bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use tagfex_core::analysis::{compute_metrics, CkaReport, RunMetrics};
use tagfex_core::merge::AttentionRecord;
use tagfex_core::pruning::PruningPlan;
use tagfex_core::Tensor;

use crate::fsutil::write_atomic;

/// Evaluation after one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    /// Accuracy over the held-out samples of every seen task.
    pub accuracy: f64,
    /// Accuracy on each seen task's held-out samples.
    pub per_task: Vec<f64>,
    pub inference_params: usize,
    pub ta_params: usize,
    pub cka: Option<CkaReport>,
    /// Mean total loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub seed: u64,
    pub config_hash: String,
    #[serde(flatten)]
    pub metrics: RunMetrics,
    pub per_task: Vec<Vec<f64>>,
    pub ta_params: Vec<usize>,
    pub cka_mean_off_diagonal: Vec<Option<f64>>,
}

impl MetricsFile {
    pub fn new(seed: u64, config_hash: &str, history: &[TaskRecord]) -> Result<Self> {
        let acc: Vec<f64> = history.iter().map(|r| r.accuracy).collect();
        let params: Vec<usize> = history.iter().map(|r| r.inference_params).collect();
        Ok(Self {
            seed,
            config_hash: config_hash.into(),
            metrics: compute_metrics(&acc, &params)?,
            per_task: history.iter().map(|r| r.per_task.clone()).collect(),
            ta_params: history.iter().map(|r| r.ta_params).collect(),
            cka_mean_off_diagonal: history.iter().map(|r| r.cka.as_ref().map(|c| c.mean_off_diagonal)).collect(),
        })
    }
}

pub fn format_matrix(rows: usize, cols: usize, values: &[f64]) -> String {
    let mut s = format!("{rows} {cols}\n");
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols].iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_matrix(text: &str) -> Result<Tensor> {
    let mut lines = text.lines();
    let header = lines.next().context("empty matrix file")?;
    let dims: Vec<usize> = header.split_whitespace().map(str::parse).collect::<Result<_, _>>().context("matrix header")?;
    ensure!(dims.len() == 2, "matrix header must be `rows cols`");
    let mut data = Vec::with_capacity(dims[0] * dims[1]);
    for line in lines {
        let row: Vec<f64> = line.split_whitespace().map(str::parse).collect::<Result<_, _>>().context("matrix value")?;
        ensure!(row.len() == dims[1], "row of {} values, expected {}", row.len(), dims[1]);
        data.extend(row);
    }
    Ok(Tensor::new(&dims, data)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn attention_file(task: usize, epoch: usize) -> String {
    format!("attn_t{task}_e{epoch}.txt")
}

pub fn write_attention(dir: &Path, rec: &AttentionRecord) -> Result<()> {
    let text = format_matrix(rec.tokens, 2 * rec.tokens, rec.map.data());
    write_atomic(&dir.join(attention_file(rec.task, rec.epoch)), text.as_bytes())
}

pub fn write_cka(dir: &Path, task: usize, report: &CkaReport) -> Result<()> {
    let k = report.matrix.len();
    let flat: Vec<f64> = report.matrix.iter().flatten().copied().collect();
    write_atomic(&dir.join(format!("cka_t{task}.txt")), format_matrix(k, k, &flat).as_bytes())
}

/// Task → per-epoch task-agnostic attention mass, epoch 0 first.
pub fn attention_mass(records: &[AttentionRecord]) -> BTreeMap<usize, Vec<f64>> {
    let mut out: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for r in records {
        out.entry(r.task).or_default().push((r.epoch, r.ta_side_mass()));
    }
    out.into_iter()
        .map(|(t, mut v)| {
            v.sort_by_key(|e| e.0);
            (t, v.into_iter().map(|e| e.1).collect())
        })
        .collect()
}

pub fn write_plan(path: &Path, plan: &PruningPlan) -> Result<()> {
    write_atomic(path, toml::to_string_pretty(plan)?.as_bytes())
}

pub fn read_metrics(dir: &Path) -> Result<MetricsFile> {
    let path = dir.join("metrics.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Human-readable summary table.
pub fn report(metrics: &MetricsFile, history: &[TaskRecord], mass: &BTreeMap<usize, Vec<f64>>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed {}  config {}", metrics.seed, &metrics.config_hash[..12.min(metrics.config_hash.len())]);
    let _ = writeln!(s, "{:>4}  {:>8}  {:>10}  {:>10}  {:>8}  per-task", "task", "accuracy", "params", "ta_params", "cka");
    for r in history {
        let cka = r.cka.as_ref().map_or("-".to_string(), |c| format!("{:.4}", c.mean_off_diagonal));
        let per: Vec<String> = r.per_task.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(
            s,
            "{:>4}  {:>8.4}  {:>10}  {:>10}  {:>8}  {}",
            r.task,
            r.accuracy,
            r.inference_params,
            r.ta_params,
            cka,
            per.join(" ")
        );
    }
    let _ = writeln!(s, "Avg {:.4}  Last {:.4}", metrics.metrics.avg, metrics.metrics.last);
    for (t, series) in mass {
        if let (Some(first), Some(last)) = (series.first(), series.last()) {
            let _ = writeln!(s, "task {t} ta-side attention: epoch 0 {first:.4} -> final {last:.4}");
        }
    }
    s
}

/// Writes metrics, attention, CKA matrices and the report for a run.
pub fn emit_all(dir: &Path, seed: u64, config_hash: &str, history: &[TaskRecord], attention: &[AttentionRecord]) -> Result<MetricsFile> {
    let metrics = MetricsFile::new(seed, config_hash, history)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    for r in history {
        if let Some(c) = &r.cka {
            write_cka(dir, r.task, c)?;
        }
    }
    for rec in attention {
        write_attention(dir, rec)?;
    }
    let mass = attention_mass(attention);
    write_json(&dir.join("attention_mass.json"), &mass)?;
    write_atomic(&dir.join("report.txt"), report(&metrics, history, &mass).as_bytes())?;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_text_round_trips_exactly() {
        let vals = [0.1, 1.0 / 3.0, -2.5e-17, 7.0, f64::MIN_POSITIVE, 0.30000000000000004];
        let back = parse_matrix(&format_matrix(2, 3, &vals)).unwrap();
        assert_eq!(back.shape(), [2, 3]);
        assert!(back.data().iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn bad_matrix_files_are_errors() {
        assert!(parse_matrix("").is_err());
        assert!(parse_matrix("2 2\n1 2\n3\n").is_err());
        assert!(parse_matrix("1 1\nx\n").is_err());
    }

    #[test]
    fn mass_series_sorted_by_epoch() {
        let rec = |epoch, ta: f64| AttentionRecord {
            task: 1,
            epoch,
            tokens: 1,
            map: Tensor::new(&[1, 2], vec![1.0 - ta, ta]).unwrap(),
        };
        let m = attention_mass(&[rec(2, 0.2), rec(0, 0.7), rec(1, 0.5)]);
        assert_eq!(m[&1], [0.7, 0.5, 0.2]);
    }
}
