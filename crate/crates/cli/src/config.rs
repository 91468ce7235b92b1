use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tealab_core::oracle::SoftminOptimizer;
use tealab_core::rl::TrainerConfig;
use tealab_core::traffic::{BaseModel, SequenceKind, SequenceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Prev,
    Avgk,
    Oblivious,
}

/// Sequence recipe without the per-run fields (size, length, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceTemplate {
    pub kind: SequenceKind,
    #[serde(default = "one")]
    pub q: usize,
    #[serde(default = "one_f")]
    pub p: f64,
    pub base: BaseModel,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

impl SequenceTemplate {
    pub fn spec(&self, n: usize, length: usize, seed: u64) -> SequenceSpec {
        SequenceSpec {
            kind: self.kind,
            n,
            base: self.base.clone(),
            q: self.q,
            p: self.p,
            length,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_train")]
    pub train_count: usize,
    #[serde(default = "default_test")]
    pub test_count: usize,
    #[serde(default = "default_length")]
    pub length: usize,
    /// Rescale every matrix so the first training matrix has optimal congestion 1.
    #[serde(default = "yes")]
    pub calibrate: bool,
    pub sequence: SequenceTemplate,
}

fn default_train() -> usize {
    7
}
fn default_test() -> usize {
    3
}
fn default_length() -> usize {
    60
}
fn yes() -> bool {
    true
}

/// Knobs for the softmin weight search used by the history baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftminSettings {
    pub budget: usize,
    pub restarts: usize,
    pub stages: usize,
}

impl Default for SoftminSettings {
    fn default() -> Self {
        let d = SoftminOptimizer::default();
        SoftminSettings { budget: d.budget, restarts: d.restarts, stages: d.stages }
    }
}

impl SoftminSettings {
    pub fn optimizer(&self, gamma: f64, seed: u64) -> SoftminOptimizer {
        SoftminOptimizer {
            gamma,
            budget: self.budget,
            restarts: self.restarts,
            stages: self.stages,
            seed,
            ..SoftminOptimizer::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// History length; falls back to the top-level `k`.
    pub k: Option<usize>,
    /// Sequence class to learn; falls back to the dataset's.
    pub sequence: Option<SequenceTemplate>,
    /// Matrix size; falls back to the topology's node count.
    pub nodes: Option<usize>,
}

impl Default for SlConfig {
    fn default() -> Self {
        SlConfig { epochs: 2000, learning_rate: 1e-3, k: None, sequence: None, nodes: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Relative paths resolve against the config file's directory.
    pub topology: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "all_baselines")]
    pub baselines: Vec<Baseline>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub softmin: SoftminSettings,
    #[serde(default)]
    pub sl: SlConfig,
}

fn default_k() -> usize {
    10
}
fn default_gamma() -> f64 {
    2.0
}
fn all_baselines() -> Vec<Baseline> {
    vec![Baseline::Prev, Baseline::Avgk, Baseline::Oblivious]
}

/// A parsed config together with the bytes it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    pub sha256: String,
}

impl LoadedConfig {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if config.topology.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            config.topology = base.join(&config.topology);
        }
        config.validate()?;
        Ok(LoadedConfig {
            config,
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(text.as_bytes())),
        })
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        let d = &self.dataset;
        ensure!(d.train_count >= 1 && d.test_count >= 1, "train_count and test_count must be at least 1");
        ensure!(self.k >= 1, "k must be at least 1");
        ensure!(d.length > self.k, "sequence length {} leaves no windows for k = {}", d.length, self.k);
        ensure!(self.gamma > 0.0 && self.gamma.is_finite(), "gamma must be positive");
        ensure!(self.topology.exists(), "topology file {} does not exist", self.topology.display());
        self.trainer_config(0).validate()?;
        ensure!(self.softmin.budget >= 1 && self.softmin.restarts >= 1, "softmin budget and restarts must be positive");
        ensure!(self.sl.learning_rate > 0.0, "sl.learning_rate must be positive");
        Ok(())
    }

    /// Trainer settings with the experiment-wide `k`, `gamma` and seed applied.
    pub fn trainer_config(&self, seed: u64) -> TrainerConfig {
        TrainerConfig { k: self.k, softmin_gamma: self.gamma, seed, ..self.trainer.clone() }
    }

    pub fn sl_k(&self) -> usize {
        self.sl.k.unwrap_or(self.k)
    }
}
