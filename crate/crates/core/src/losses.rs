//! The pairwise ranking loss and its length-regularized variant.
//!
//! Trajectory scores live in log space: `log S(τ) = Σ R̂(s)` over the states the
//! trajectory arrives at. Trajectories are encoded once as counts over unique
//! feature rows, so a batch evaluates the network once per distinct state.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Var};
use crate::demos::{RankedPair, Trajectory};
use crate::error::{MlreError, Result};
use crate::reward_model::{grad, GradResult, Graph, RewardNet};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Trex,
    Mlre,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub clamp_bound: f64,
    pub batch_size: usize,
    pub kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            clamp_bound: 50.0,
            batch_size: 32,
            kind: LossKind::Mlre,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(MlreError::config("loss.lambda", "must be positive"));
        }
        if !(self.clamp_bound > 0.0 && self.clamp_bound.is_finite()) {
            return Err(MlreError::config("loss.clamp_bound", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(MlreError::config("loss.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Trajectories as sparse counts over the distinct feature rows they visit.
#[derive(Clone, Debug)]
pub struct EncodedTrajectories<F> {
    rows: Vec<Vec<F>>,
    counts: Vec<Vec<(usize, F)>>,
    lengths: Vec<usize>,
}

impl<F: Scalar> EncodedTrajectories<F> {
    pub fn new(trajs: &[Trajectory]) -> Result<Self> {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut rows = Vec::new();
        let mut counts = Vec::with_capacity(trajs.len());
        let mut lengths = Vec::with_capacity(trajs.len());
        for traj in trajs {
            if traj.length == 0 {
                return Err(MlreError::Contract(format!(
                    "empty trajectory in task {}",
                    traj.task_id
                )));
            }
            let mut local: Vec<(usize, usize)> = Vec::new();
            for phi in traj.arrived_features() {
                let key: Vec<u64> = phi.iter().map(|v| v.to_bits()).collect();
                let next = rows.len();
                let r = *index.entry(key).or_insert(next);
                if r == next {
                    rows.push(phi.iter().map(|&v| F::lit(v)).collect());
                }
                match local.iter_mut().find(|(i, _)| *i == r) {
                    Some((_, c)) => *c += 1,
                    None => local.push((r, 1)),
                }
            }
            local.sort_unstable();
            counts.push(local.into_iter().map(|(r, c)| (r, F::lit(c as f64))).collect());
            lengths.push(traj.length);
        }
        Ok(EncodedTrajectories { rows, counts, lengths })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn length(&self, i: usize) -> usize {
        self.lengths[i]
    }

    fn check_pairs(&self, pairs: &[RankedPair]) -> Result<()> {
        if pairs.is_empty() {
            return Err(MlreError::Contract("loss over an empty pair batch".into()));
        }
        if let Some(p) = pairs.iter().find(|p| p.low >= self.len() || p.high >= self.len()) {
            return Err(MlreError::Contract(format!(
                "pair ({}, {}) out of range for {} trajectories",
                p.low,
                p.high,
                self.len()
            )));
        }
        Ok(())
    }

    fn used_rows(&self, pairs: &[RankedPair]) -> Vec<bool> {
        let mut used = vec![false; self.rows.len()];
        for p in pairs {
            for &(r, _) in self.counts[p.low].iter().chain(&self.counts[p.high]) {
                used[r] = true;
            }
        }
        used
    }

    /// `log S(τ_i)` for every trajectory under `net`.
    pub fn log_scores(&self, net: &RewardNet<F>) -> Vec<F> {
        let r: Vec<F> = self.rows.iter().map(|phi| net.value(phi)).collect();
        self.counts
            .iter()
            .map(|c| c.iter().fold(F::zero(), |acc, &(i, n)| acc + n * r[i]))
            .collect()
    }
}

fn regularizer<F: Scalar>(len: usize, log_s: F, lambda: F, bound: F) -> F {
    (F::lit(len as f64) * (-log_s).max(-bound).min(bound).exp() - lambda).abs()
}

/// Loss value from precomputed log scores.
pub fn loss_from_scores<F: Scalar>(
    log_s: &[F],
    lengths: impl Fn(usize) -> usize,
    pairs: &[RankedPair],
    cfg: &LossConfig,
) -> F {
    let lambda = F::lit(cfg.lambda);
    let bound = F::lit(cfg.clamp_bound);
    let total = pairs.iter().fold(F::zero(), |acc, p| {
        let mut term = softplus(log_s[p.low] - log_s[p.high]);
        if cfg.kind == LossKind::Mlre {
            term += regularizer(lengths(p.low), log_s[p.low], lambda, bound)
                + regularizer(lengths(p.high), log_s[p.high], lambda, bound);
        }
        acc + term
    });
    total / F::lit(pairs.len() as f64)
}

pub fn loss_value<F: Scalar>(
    net: &RewardNet<F>,
    enc: &EncodedTrajectories<F>,
    pairs: &[RankedPair],
    cfg: &LossConfig,
) -> Result<F> {
    enc.check_pairs(pairs)?;
    let log_s = enc.log_scores(net);
    let v = loss_from_scores(&log_s, |i| enc.lengths[i], pairs, cfg);
    if !v.is_finite() {
        return Err(MlreError::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// The loss recorded on `graph`'s tape.
pub fn loss_var<'t, F: Scalar>(
    graph: &Graph<'t, F>,
    enc: &EncodedTrajectories<F>,
    pairs: &[RankedPair],
    cfg: &LossConfig,
) -> Var<'t, F> {
    let tape = graph.tape();
    let used = enc.used_rows(pairs);
    let rewards: Vec<Option<Var<'t, F>>> = enc
        .rows
        .iter()
        .zip(&used)
        .map(|(phi, &u)| u.then(|| graph.reward(phi)))
        .collect();
    let mut scores: HashMap<usize, Var<'t, F>> = HashMap::new();
    let mut score = |i: usize| {
        *scores.entry(i).or_insert_with(|| {
            let terms: Vec<(Var<'t, F>, F)> = enc.counts[i]
                .iter()
                .map(|&(r, n)| (rewards[r].expect("row marked used"), n))
                .collect();
            tape.linear_comb(&terms)
        })
    };
    let lambda = F::lit(cfg.lambda);
    let bound = F::lit(cfg.clamp_bound);
    let mut terms = Vec::with_capacity(pairs.len() * 3);
    for p in pairs {
        let (si, sj) = (score(p.low), score(p.high));
        terms.push((si - sj).softplus());
        if cfg.kind == LossKind::Mlre {
            for (s, idx) in [(si, p.low), (sj, p.high)] {
                let len = F::lit(enc.lengths[idx] as f64);
                let reg = ((-s).clamp(-bound, bound).exp() * len - lambda).abs();
                terms.push(reg);
            }
        }
    }
    let inv = F::one() / F::lit(pairs.len() as f64);
    let weighted: Vec<(Var<'t, F>, F)> = terms.into_iter().map(|v| (v, inv)).collect();
    tape.linear_comb(&weighted)
}

/// Hidden-unit signs over the rows a batch touches, plus the side of every
/// absolute value and clamp in the regularizer. Parameter vectors with equal
/// patterns lie on the same smooth piece of the loss.
pub fn branch_pattern<F: Scalar>(
    net: &RewardNet<F>,
    enc: &EncodedTrajectories<F>,
    pairs: &[RankedPair],
    cfg: &LossConfig,
) -> Vec<i8> {
    let used = enc.used_rows(pairs);
    let rows: Vec<Vec<F>> = enc
        .rows
        .iter()
        .zip(&used)
        .filter(|(_, &u)| u)
        .map(|(r, _)| r.clone())
        .collect();
    let mut pattern: Vec<i8> = net.activation_pattern(&rows).into_iter().map(i8::from).collect();
    if cfg.kind == LossKind::Mlre {
        let log_s = enc.log_scores(net);
        let lambda = F::lit(cfg.lambda);
        let bound = F::lit(cfg.clamp_bound);
        for p in pairs {
            for i in [p.low, p.high] {
                let x = -log_s[i];
                pattern.push(if x < -bound {
                    -1
                } else if x > bound {
                    1
                } else {
                    0
                });
                let arg = F::lit(enc.lengths[i] as f64) * x.max(-bound).min(bound).exp() - lambda;
                pattern.push(i8::from(arg > F::zero()));
            }
        }
    }
    pattern
}

pub fn loss_grad<F: Scalar>(
    net: &RewardNet<F>,
    enc: &EncodedTrajectories<F>,
    pairs: &[RankedPair],
    cfg: &LossConfig,
) -> Result<GradResult<F>> {
    enc.check_pairs(pairs)?;
    grad(net, |g| loss_var(g, enc, pairs, cfg))
}

/// Ranking loss over `pairs` indexing into `trajs`.
pub fn trex_loss<F: Scalar>(net: &RewardNet<F>, pairs: &[RankedPair], trajs: &[Trajectory]) -> Result<F> {
    let cfg = LossConfig {
        kind: LossKind::Trex,
        ..LossConfig::default()
    };
    loss_value(net, &EncodedTrajectories::new(trajs)?, pairs, &cfg)
}

/// Ranking loss plus the length regularizer, with `cfg.kind` ignored.
pub fn mlre_loss<F: Scalar>(
    net: &RewardNet<F>,
    pairs: &[RankedPair],
    trajs: &[Trajectory],
    cfg: &LossConfig,
) -> Result<F> {
    let cfg = LossConfig {
        kind: LossKind::Mlre,
        ..cfg.clone()
    };
    loss_value(net, &EncodedTrajectories::new(trajs)?, pairs, &cfg)
}

/// Seeded shuffle of `pairs`, then contiguous chunks of `batch_size`.
pub fn batch_iter(pairs: &[RankedPair], batch_size: usize, seed: u64) -> Result<Vec<Vec<RankedPair>>> {
    if batch_size == 0 {
        return Err(MlreError::config("loss.batch_size", "must be at least 1"));
    }
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(&mut seed::rng(seed, 0x4241_5443));
    Ok(shuffled.chunks(batch_size).map(<[RankedPair]>::to_vec).collect())
}
