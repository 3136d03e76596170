#![allow(dead_code)]

use mlre::demos::{RankedPair, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A trajectory with random features; states and returns are placeholders.
pub fn synthetic_trajectory(rng: &mut ChaCha8Rng, max_len: usize, row_pool: &[Vec<f64>]) -> Trajectory {
    let length = rng.gen_range(1..=max_len);
    let features: Vec<Vec<f64>> = (0..=length)
        .map(|_| row_pool[rng.gen_range(0..row_pool.len())].clone())
        .collect();
    Trajectory {
        task_id: "synthetic".into(),
        states: vec![0; length + 1],
        actions: vec![0; length],
        features,
        true_return: 0.0,
        true_sum: 0.0,
        length,
        one_life: false,
    }
}

pub fn row_pool(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn random_pairs(rng: &mut ChaCha8Rng, n_trajs: usize, n_pairs: usize) -> Vec<RankedPair> {
    (0..n_pairs)
        .map(|_| {
            let low = rng.gen_range(0..n_trajs);
            let mut high = rng.gen_range(0..n_trajs);
            while high == low {
                high = rng.gen_range(0..n_trajs);
            }
            RankedPair { low, high, margin: 1.0 }
        })
        .collect()
}

use mlre::config::RunConfig;
use mlre::demos::PairDataset;
use mlre::env::TaskSpec;
use mlre::pipeline;

/// Default-sized experiment: training datasets plus the target task with a
/// small target pair budget.
pub struct Experiment {
    pub cfg: RunConfig,
    pub train: Vec<PairDataset>,
    pub target_task: TaskSpec,
    pub target: PairDataset,
}

pub fn experiment(seed: u64, pairs_target: usize) -> Experiment {
    let cfg = RunConfig {
        seed,
        pairs_target,
        ..RunConfig::default()
    };
    let train = cfg
        .train_seeds
        .iter()
        .map(|&s| pipeline::generate_task(&cfg, s, cfg.pairs_per_train_task).unwrap().1)
        .collect();
    let (target_task, target) = pipeline::generate_task(&cfg, cfg.target_seed, cfg.pairs_target).unwrap();
    Experiment {
        cfg,
        train,
        target_task,
        target,
    }
}
