use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tagfex::config::ExperimentConfig;
use tagfex::experiment::{ablation_matrix, analyze, config_base, prune_run, run_seed, RunOptions};

#[derive(Parser)]
#[command(name = "tagfex", version, about = "Class-incremental learning with task-agnostic guided feature expansion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config, resuming from checkpoints when present.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root, overriding the config's `output` and $TAGFEX_OUT.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after this task index, leaving a resumable checkpoint.
        #[arg(long, hide = true)]
        stop_after_task: Option<usize>,
    },
    /// Run the DER baseline and the four task-agnostic ablations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit metrics and CKA reports from a run's checkpoints.
    Analyze {
        #[arg(long)]
        run: PathBuf,
    },
    /// Prune every task-specific extractor of a finished run.
    Prune {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        rate: f64,
    },
}

fn load(config: &PathBuf, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if out.is_some() {
        cfg.output = out;
    }
    Ok(cfg)
}

fn run_all(cfg: &ExperimentConfig, base: &std::path::Path, seeds: &[u64], opts: &RunOptions) -> Result<Vec<(u64, Option<f64>, Option<f64>)>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let outcome = run_seed(cfg, seed, base, opts)?;
        let last = outcome.metrics.as_ref().map(|m| m.metrics.last);
        let avg = outcome.metrics.as_ref().map(|m| m.metrics.avg);
        match (avg, last) {
            (Some(a), Some(l)) => println!("{} seed {seed}: Avg {a:.4} Last {l:.4} -> {}", cfg.name, outcome.dir.display()),
            _ => println!("{} seed {seed}: stopped after {} tasks -> {}", cfg.name, outcome.history.len(), outcome.dir.display()),
        }
        rows.push((seed, avg, last));
    }
    Ok(rows)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            out,
            stop_after_task,
        } => {
            let cfg = load(&config, out)?;
            let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            run_all(&cfg, &config_base(&config), &seeds, &RunOptions { stop_after_task })?;
        }
        Command::Ablate { config, out } => {
            let base_cfg = load(&config, out)?;
            let mut table = Vec::new();
            for cfg in ablation_matrix(&base_cfg) {
                let rows = run_all(&cfg, &config_base(&config), &cfg.seeds.clone(), &RunOptions::default())?;
                let lasts: Vec<f64> = rows.iter().filter_map(|r| r.2).collect();
                table.push((cfg.name.clone(), lasts.iter().sum::<f64>() / lasts.len().max(1) as f64));
            }
            println!("\n{:<48} mean Last", "config");
            for (name, last) in table {
                println!("{name:<48} {last:.4}");
            }
        }
        Command::Analyze { run } => {
            let m = analyze(&run)?;
            println!("Avg {:.4} Last {:.4}", m.metrics.avg, m.metrics.last);
            print!("{}", std::fs::read_to_string(run.join("report.txt"))?);
        }
        Command::Prune { run, rate } => {
            let s = prune_run(&run, rate)?;
            println!(
                "params {} -> {} (rates {:?}), accuracy {:.4} -> {:.4}",
                s.params_before, s.params_after, s.achieved_rates, s.accuracy_before, s.accuracy_after
            );
        }
    }
    Ok(())
}
