//! Run configuration, read from TOML.
//!
//! Every section is optional and falls back to the defaults below; unknown keys
//! are rejected. The global `seed` drives every random stream of a run, so
//! the `seed` keys inside `[meta]` and `[ppo]` are overwritten.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::demos::DEFAULT_DEMO_EPSILONS;
use crate::env::{TaskDistribution, DEFAULT_FEATURE_DIM};
use crate::error::{MlreError, Result};
use crate::eval::PROBES_PER_EPSILON;
use crate::gradcheck::GradcheckConfig;
use crate::io;
use crate::losses::LossConfig;
use crate::meta::MetaConfig;
use crate::policy_opt::PpoConfig;

pub const CONFIG_VERSION: &str = "mlre-cfg-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: String,
    pub benchmark: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_seeds: Vec<u64>,
    pub target_seed: u64,
    pub demos_per_task: usize,
    pub demo_epsilons: Vec<f64>,
    pub pairs_per_train_task: usize,
    pub pairs_target: usize,
    pub support_fraction: f64,
    /// Reward network widths from input to output.
    pub layer_sizes: Vec<usize>,
    pub probes_per_epsilon: usize,
    pub eval_episodes: usize,
    pub task_distribution: TaskDistribution,
    pub meta: MetaConfig,
    pub loss: LossConfig,
    pub ppo: PpoConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION.into(),
            benchmark: "gridworld".into(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            train_seeds: vec![1, 2, 3, 4, 5],
            target_seed: 100,
            demos_per_task: 50,
            demo_epsilons: DEFAULT_DEMO_EPSILONS.to_vec(),
            pairs_per_train_task: 1000,
            pairs_target: 500,
            support_fraction: 0.8,
            layer_sizes: vec![DEFAULT_FEATURE_DIM, 64, 64, 1],
            probes_per_epsilon: PROBES_PER_EPSILON,
            eval_episodes: 1000,
            task_distribution: TaskDistribution::default(),
            meta: MetaConfig::default(),
            loss: LossConfig::default(),
            ppo: PpoConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| MlreError::Config {
            key: "config".into(),
            reason: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&io::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(MlreError::config(
                "version",
                format!("expected {CONFIG_VERSION}, found {}", self.version),
            ));
        }
        if self.benchmark != "gridworld" {
            return Err(MlreError::config("benchmark", "only gridworld is available"));
        }
        if self.train_seeds.is_empty() {
            return Err(MlreError::config("train_seeds", "need at least one training task"));
        }
        let mut sorted = self.train_seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.train_seeds.len() {
            return Err(MlreError::config("train_seeds", "seeds must be distinct"));
        }
        if self.train_seeds.contains(&self.target_seed) {
            return Err(MlreError::config("target_seed", "must not be one of train_seeds"));
        }
        if self.demos_per_task < 2 {
            return Err(MlreError::config("demos_per_task", "need at least two demonstrations"));
        }
        if self.demo_epsilons.is_empty() || self.demo_epsilons.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(MlreError::config("demo_epsilons", "need one or more values in [0, 1]"));
        }
        if self.pairs_per_train_task == 0 {
            return Err(MlreError::config("pairs_per_train_task", "must be at least 1"));
        }
        if self.pairs_target == 0 {
            return Err(MlreError::config("pairs_target", "must be at least 1"));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(MlreError::config(
                "support_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        let sizes = &self.layer_sizes;
        if sizes.len() < 2 || sizes[0] != DEFAULT_FEATURE_DIM || *sizes.last().unwrap() != 1 || sizes.contains(&0) {
            return Err(MlreError::config(
                "layer_sizes",
                format!("must start at {DEFAULT_FEATURE_DIM}, end at 1, with positive widths"),
            ));
        }
        if self.probes_per_epsilon == 0 {
            return Err(MlreError::config("probes_per_epsilon", "must be at least 1"));
        }
        if self.eval_episodes == 0 {
            return Err(MlreError::config("eval_episodes", "must be at least 1"));
        }
        self.task_distribution.validate()?;
        self.meta.validate()?;
        self.loss.validate()?;
        self.ppo.validate()?;
        Ok(())
    }
}
