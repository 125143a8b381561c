//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tagfex_core::data::{CollisionSpec, SplitSpec};
use tagfex_core::learner::LearnerConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "TAGFEX_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Synthetic color/shape stream, held out per class.
    Collision {
        #[serde(default)]
        spec: CollisionSpec,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// A dataset directory with `meta.json` and packed binary splits.
    Directory { path: PathBuf, split: SplitSpec },
}

fn default_test_fraction() -> f64 {
    0.4
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Collision {
            spec: CollisionSpec::default(),
            test_fraction: default_test_fraction(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Held-out samples used for CKA.
    pub cka_probe: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { cka_probe: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub learner: LearnerConfig,
    pub analysis: AnalysisConfig,
    pub seeds: Vec<u64>,
    /// Output root; falls back to `$TAGFEX_OUT`, then `runs`.
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            dataset: DatasetConfig::default(),
            learner: LearnerConfig::default(),
            analysis: AnalysisConfig::default(),
            seeds: vec![0],
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.learner.validate()?;
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            bail!("run name {:?} is not a plain directory name", self.name);
        }
        if self.seeds.is_empty() {
            bail!("no seeds given");
        }
        let f = &self.learner.flags;
        if f.der_baseline && (f.disable_transfer || f.disable_continual_ta || f.disable_merge) {
            bail!("der_baseline already removes the task-agnostic branch; leave the other ablation flags off");
        }
        if let DatasetConfig::Collision { test_fraction, .. } = &self.dataset {
            if !(0.0..1.0).contains(test_fraction) {
                bail!("test_fraction must be in [0, 1)");
            }
        }
        Ok(())
    }

    pub fn output_root(&self) -> PathBuf {
        self.output
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_root().join(&self.name).join(format!("seed_{seed}"))
    }

    /// Digest of everything that determines a run's numbers, excluding the
    /// seed list and output location.
    pub fn hash(&self, seed: u64) -> String {
        let canonical = serde_json::to_string(&(&self.dataset, &self.learner, &self.analysis, seed)).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
