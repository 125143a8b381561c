//! End-to-end runs, resumption, ablation grids and offline analysis.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use tagfex_core::analysis::CkaReport;
use tagfex_core::data::{Image, Sample};
use tagfex_core::learner::{Learner, PruneMode};

use crate::artifacts::{self, emit_all, write_plan, MetricsFile, TaskRecord};
use crate::checkpoint::Checkpoint;
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::dataset_io::{load_stream, Stream};
use crate::fsutil::write_atomic;

pub const LATEST: &str = "checkpoint.bin";

pub fn task_checkpoint(task: usize) -> String {
    format!("checkpoint_t{task}.bin")
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop once this task has finished, leaving a resumable checkpoint.
    pub stop_after_task: Option<usize>,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub history: Vec<TaskRecord>,
    /// Present once every task has finished.
    pub metrics: Option<MetricsFile>,
    pub learner: Learner,
}

/// Evenly strided subset of at most `n` items.
fn strided<T: Copy>(items: &[T], n: usize) -> Vec<T> {
    if items.len() <= n {
        return items.to_vec();
    }
    (0..n).map(|i| items[i * items.len() / n]).collect()
}

/// Accuracy, parameter counts and extractor CKA after task `task`.
pub fn evaluate_task(learner: &Learner, stream: &Stream, task: usize, cka_probe: usize, epoch_losses: Vec<f64>) -> Result<TaskRecord> {
    let seen: Vec<&Sample> = stream.test[..=task].iter().flat_map(|t| t.samples.iter()).collect();
    ensure!(!seen.is_empty(), "no held-out samples for tasks 0..={task}");
    let per_task = stream.test[..=task]
        .iter()
        .map(|t| learner.evaluate(&t.samples.iter().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>, _>>()?;
    let probe: Vec<&Image> = strided(&seen, cka_probe).into_iter().map(|s| &s.image).collect();
    let cka: Option<CkaReport> = if probe.len() >= 2 { learner.cka(&probe)? } else { None };
    Ok(TaskRecord {
        task,
        accuracy: learner.evaluate(&seen)?,
        per_task,
        inference_params: learner.inference_params(),
        ta_params: learner.ta_params(),
        cka,
        epoch_losses,
    })
}

/// Makes a directory dataset path absolute, so the config saved with a run
/// (and its hash) does not depend on the working directory.
pub fn resolve_paths(cfg: &ExperimentConfig, base: &Path) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    if let DatasetConfig::Directory { path, .. } = &mut out.dataset {
        if path.is_relative() {
            let joined = base.join(&*path);
            *path = joined.canonicalize().with_context(|| format!("resolving {}", joined.display()))?;
        }
    }
    Ok(out)
}

fn prepare_dir(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut own = cfg.clone();
    own.seeds = vec![seed];
    write_atomic(&dir.join("config.toml"), own.to_toml()?.as_bytes())
}

/// Trains (or resumes) one seed of `cfg` into `dir`. Relative dataset paths
/// resolve against `base`.
pub fn run_seed_in(cfg: &ExperimentConfig, seed: u64, base: &Path, dir: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let cfg = &resolve_paths(cfg, base)?;
    let hash = cfg.hash(seed);
    let stream = load_stream(&cfg.dataset, base, seed)?;
    let classes = stream.task_classes();

    let latest = dir.join(LATEST);
    let (mut learner, mut history) = if latest.exists() {
        let ckpt = Checkpoint::load(&latest)?;
        if ckpt.header.config_hash != hash {
            bail!("{} was written by a different configuration; refusing to resume", latest.display());
        }
        ensure!(ckpt.header.task_classes == classes, "checkpoint class order differs from the dataset");
        ckpt.restore(&stream.train)?
    } else {
        (Learner::new(cfg.learner.clone(), seed)?, Vec::new())
    };
    prepare_dir(cfg, seed, dir)?;

    for t in learner.tasks_finished..stream.num_tasks() {
        if opts.stop_after_task.is_some_and(|k| t > k) {
            break;
        }
        let task = &stream.train[t];
        learner.begin_task(&classes[t])?;
        let losses = learner.train_task(task)?;
        learner.end_task(task)?;
        if learner.config.prune.enabled {
            if let Some(plan) = learner.plans.last() {
                write_plan(&dir.join(format!("prune_t{t}.toml")), plan)?;
            }
        }
        history.push(evaluate_task(&learner, &stream, t, cfg.analysis.cka_probe, losses)?);
        let ckpt = Checkpoint::capture(&learner, &hash, classes.clone(), history.clone());
        let bytes = ckpt.to_bytes()?;
        write_atomic(&dir.join(task_checkpoint(t)), &bytes)?;
        write_atomic(&latest, &bytes)?;
    }

    let metrics = if learner.tasks_finished == stream.num_tasks() {
        Some(emit_all(dir, seed, &hash, &history, &learner.attention)?)
    } else {
        None
    };
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        history,
        metrics,
        learner,
    })
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64, base: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    run_seed_in(cfg, seed, base, &cfg.seed_dir(seed), opts)
}

/// The DER baseline followed by {re-initialized, continual} task-agnostic
/// model × {transfer off, transfer on}.
pub fn ablation_matrix(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut out = Vec::with_capacity(5);
    let mut der = base.clone();
    der.name = format!("{}-der", base.name);
    der.learner.flags = Default::default();
    der.learner.flags.der_baseline = true;
    out.push(der);
    for continual in [false, true] {
        for transfer in [false, true] {
            let mut c = base.clone();
            c.learner.flags.der_baseline = false;
            c.learner.flags.disable_merge = false;
            c.learner.flags.disable_continual_ta = !continual;
            c.learner.flags.disable_transfer = !transfer;
            c.name = format!(
                "{}-{}-{}",
                base.name,
                if continual { "continual_ta" } else { "reinit_ta" },
                if transfer { "transfer" } else { "no_transfer" }
            );
            out.push(c);
        }
    }
    out
}

/// Loads the configuration and seed a run directory was produced with.
/// Dataset paths in it are already absolute.
pub fn load_run_config(run: &Path) -> Result<(ExperimentConfig, u64)> {
    let cfg = ExperimentConfig::load(&run.join("config.toml"))?;
    ensure!(cfg.seeds.len() == 1, "run config must name exactly one seed");
    let seed = cfg.seeds[0];
    Ok((cfg, seed))
}

/// Recomputes evaluation and CKA from every per-task checkpoint of `run`
/// and re-emits the artifacts.
pub fn analyze(run: &Path) -> Result<MetricsFile> {
    let (cfg, seed) = load_run_config(run)?;
    let hash = cfg.hash(seed);
    let stream = load_stream(&cfg.dataset, run, seed)?;
    let mut history = Vec::new();
    let mut attention = Vec::new();
    for t in 0..stream.num_tasks() {
        let path = run.join(task_checkpoint(t));
        if !path.exists() {
            break;
        }
        let ckpt = Checkpoint::load(&path)?;
        ensure!(ckpt.header.config_hash == hash, "{} does not match the run config", path.display());
        let losses = ckpt.header.history.get(t).map(|r| r.epoch_losses.clone()).unwrap_or_default();
        let (learner, _) = ckpt.restore(&stream.train)?;
        history.push(evaluate_task(&learner, &stream, t, cfg.analysis.cka_probe, losses)?);
        attention = learner.attention;
    }
    ensure!(!history.is_empty(), "no checkpoints in {}", run.display());
    emit_all(run, seed, &hash, &history, &attention)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub target_rate: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// Achieved compression of each task-specific extractor.
    pub achieved_rates: Vec<f64>,
}

/// Prunes every task-specific extractor of the run's latest checkpoint at
/// `rate` and writes the plans, a summary and the pruned checkpoint to
/// `run/pruned_{rate}`.
pub fn prune_run(run: &Path, rate: f64) -> Result<PruneSummary> {
    let (cfg, seed) = load_run_config(run)?;
    let stream = load_stream(&cfg.dataset, run, seed)?;
    let ckpt = Checkpoint::load(&run.join(LATEST))?;
    ensure!(ckpt.header.config_hash == cfg.hash(seed), "checkpoint does not match the run config");
    let task_classes = ckpt.header.task_classes.clone();
    let (mut learner, history) = ckpt.restore(&stream.train)?;
    let last = learner.tasks_finished.checked_sub(1).context("checkpoint has no finished task")?;
    let seen: Vec<&Sample> = stream.test[..=last].iter().flat_map(|t| t.samples.iter()).collect();

    let accuracy_before = learner.evaluate(&seen)?;
    let params_before = learner.inference_params();
    learner.config.prune.rate = rate;
    let out = run.join(format!("pruned_{rate}"));
    let n = learner.ts.as_ref().map_or(0, |ts| ts.extractors.len());
    let mut achieved_rates = Vec::with_capacity(n);
    for i in 0..n {
        let plan = learner.prune_extractor(i, &PruneMode::Fpgm)?;
        write_plan(&out.join(format!("plan_e{i}.toml")), &plan)?;
        achieved_rates.push(plan.achieved_rate);
    }
    let summary = PruneSummary {
        target_rate: rate,
        params_before,
        params_after: learner.inference_params(),
        accuracy_before,
        accuracy_after: learner.evaluate(&seen)?,
        achieved_rates,
    };
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    write_atomic(&out.join("summary.json"), &json)?;
    Checkpoint::capture(&learner, &cfg.hash(seed), task_classes, history).save(&out.join(LATEST))?;
    Ok(summary)
}

/// Directory holding the config, for resolving relative dataset paths.
pub fn config_base(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub use artifacts::read_metrics;
