//! Suboptimal demonstrators, one-life trajectory collection and ranked pair
//! datasets.

use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, TabularPolicy, TaskSpec};
use crate::error::{MlreError, Result};
use crate::seed::{self, Rng};

pub const DATASET_FORMAT: &str = "mlre-ds-1";

/// Demonstrator noise levels mixed into every task's demonstration pool.
pub const DEFAULT_DEMO_EPSILONS: [f64; 3] = [0.3, 0.5, 0.7];

/// One rollout. `features[t] = φ(states[t])`, so both hold `length + 1` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    /// `Σ_t γᵗ R*(s_{t+1})`.
    pub true_return: f64,
    /// Undiscounted `Σ_t R*(s_{t+1})`.
    pub true_sum: f64,
    pub length: usize,
    /// Ended in a pit before the horizon.
    pub one_life: bool,
}

impl Trajectory {
    /// Features of the arrived-at states `s_1 … s_L`.
    pub fn arrived_features(&self) -> &[Vec<f64>] {
        &self.features[1..]
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(MlreError::Contract("empty trajectory".into()));
        }
        if self.actions.len() != self.length
            || self.states.len() != self.length + 1
            || self.features.len() != self.length + 1
        {
            return Err(MlreError::Contract(format!(
                "trajectory lengths inconsistent: length {}, {} actions, {} states, {} feature rows",
                self.length,
                self.actions.len(),
                self.states.len(),
                self.features.len()
            )));
        }
        Ok(())
    }

    /// Recomputes `(discounted, undiscounted)` return under weights `w`.
    pub fn recompute_returns(&self, w: &[f64], gamma: f64) -> (f64, f64) {
        let mut discount = 1.0;
        let (mut ret, mut sum) = (0.0, 0.0);
        for phi in self.arrived_features() {
            let r: f64 = w.iter().zip(phi).map(|(a, b)| a * b).sum();
            ret += discount * r;
            sum += r;
            discount *= gamma;
        }
        (ret, sum)
    }
}

/// ε-greedy mixture over the planner's optimal policy.
pub fn make_demonstrator(task: &TaskSpec, epsilon: f64) -> Result<TabularPolicy> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(MlreError::config("epsilon", "must lie in [0, 1]"));
    }
    let plan = env::value_iteration(task, 1e-10)?;
    Ok(TabularPolicy::epsilon_greedy(&plan.greedy, epsilon))
}

/// Rolls out `policy` from `ρ0` until the first terminal cell or the horizon.
pub fn collect_one_life(task: &TaskSpec, policy: &TabularPolicy, n: usize, rng: &mut Rng) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(MlreError::config("n", "must be at least 1"));
    }
    let mdp = task.mdp();
    let gamma = mdp.gamma();
    (0..n)
        .map(|_| {
            let mut s = mdp.sample_initial(rng);
            let mut states = vec![s];
            let mut actions = Vec::new();
            let mut features = vec![task.features().phi(s).to_vec()];
            let (mut ret, mut sum, mut discount) = (0.0, 0.0, 1.0);
            let mut one_life = false;
            while actions.len() < mdp.horizon() {
                let a = policy.sample(s, rng);
                let t = task.step(s, a, rng)?;
                actions.push(a);
                states.push(t.next);
                features.push(task.features().phi(t.next).to_vec());
                ret += discount * t.reward;
                sum += t.reward;
                discount *= gamma;
                s = t.next;
                if t.absorbed {
                    one_life = mdp.terminal_kind(s) == Some(env::TerminalKind::Pit);
                    break;
                }
            }
            Ok(Trajectory {
                task_id: task.task_id().to_string(),
                length: actions.len(),
                states,
                actions,
                features,
                true_return: ret,
                true_sum: sum,
                one_life,
            })
        })
        .collect()
}

/// Demonstrations from a pool of ε-greedy demonstrators. `n` is split as evenly
/// as possible across `epsilons`; the output is ordered by (ε, rollout index).
pub fn collect_pool(task: &TaskSpec, epsilons: &[f64], n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if epsilons.is_empty() {
        return Err(MlreError::config("demo_epsilons", "must not be empty"));
    }
    let k = epsilons.len();
    let batches: Vec<Result<Vec<Trajectory>>> = epsilons
        .par_iter()
        .enumerate()
        .map(|(i, &eps)| {
            let count = n / k + usize::from(i < n % k);
            if count == 0 {
                return Ok(Vec::new());
            }
            let policy = make_demonstrator(task, eps)?;
            let mut rng = seed::rng(seed, i as u64);
            collect_one_life(task, &policy, count, &mut rng)
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for b in batches {
        out.extend(b?);
    }
    Ok(out)
}

/// `τ_low ≺ τ_high`. The margin is diagnostic only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPair {
    pub low: usize,
    pub high: usize,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub task_id: String,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
    pub support_pairs: Vec<RankedPair>,
    pub query_pairs: Vec<RankedPair>,
}

/// The support half of a dataset; the query pairs are not reachable from it.
#[derive(Clone, Copy, Debug)]
pub struct SupportSet<'a> {
    pub task_id: &'a str,
    pub trajectories: &'a [Trajectory],
    pub pairs: &'a [RankedPair],
}

/// Ranks by undiscounted ground-truth sum, the quantity the reward model
/// predicts. Samples `n_pairs` strictly ordered pairs uniformly without replacement
/// (all of them if fewer exist) and splits off `⌈support_frac · total⌉` as support.
pub fn build_pairs(trajs: Vec<Trajectory>, n_pairs: usize, support_frac: f64, seed: u64) -> Result<PairDataset> {
    if !(0.0..=1.0).contains(&support_frac) {
        return Err(MlreError::config("support_fraction", "must lie in [0, 1]"));
    }
    let mut ordered = Vec::new();
    for i in 0..trajs.len() {
        for j in i + 1..trajs.len() {
            let (ri, rj) = (trajs[i].true_sum, trajs[j].true_sum);
            if ri < rj {
                ordered.push(RankedPair {
                    low: i,
                    high: j,
                    margin: rj - ri,
                });
            } else if rj < ri {
                ordered.push(RankedPair {
                    low: j,
                    high: i,
                    margin: ri - rj,
                });
            }
        }
    }
    if ordered.is_empty() {
        return Err(MlreError::NoOrderedPairs(trajs.len()));
    }
    let mut rng = seed::rng(seed, 0x5041_4952);
    let total = n_pairs.min(ordered.len());
    let picked: Vec<RankedPair> = index::sample(&mut rng, ordered.len(), total)
        .into_iter()
        .map(|i| ordered[i])
        .collect();
    let n_support = (support_frac * total as f64 - 1e-9).ceil().max(0.0) as usize;
    let n_support = n_support.min(total);
    let task_id = trajs.first().map(|t| t.task_id.clone()).unwrap_or_default();
    Ok(PairDataset {
        task_id,
        seed,
        support_pairs: picked[..n_support].to_vec(),
        query_pairs: picked[n_support..].to_vec(),
        trajectories: trajs,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    task_id: String,
    seed: u64,
    n_trajectories: usize,
    n_support: usize,
    n_query: usize,
}

#[derive(Serialize, Deserialize)]
struct Section {
    section: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Support,
    Query,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    split: Split,
    low: usize,
    high: usize,
    margin: f64,
}

impl PairDataset {
    pub fn support(&self) -> SupportSet<'_> {
        SupportSet {
            task_id: &self.task_id,
            trajectories: &self.trajectories,
            pairs: &self.support_pairs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.trajectories {
            t.validate()?;
        }
        for p in self.support_pairs.iter().chain(&self.query_pairs) {
            let n = self.trajectories.len();
            if p.low >= n || p.high >= n {
                return Err(MlreError::Contract("pair references missing trajectory".into()));
            }
            if !(self.trajectories[p.high].true_sum > self.trajectories[p.low].true_sum) || !(p.margin > 0.0) {
                return Err(MlreError::Contract(format!(
                    "pair ({}, {}) is not strictly ordered",
                    p.low, p.high
                )));
            }
        }
        let key = |p: &RankedPair| (p.low, p.high);
        let support: std::collections::HashSet<_> = self.support_pairs.iter().map(key).collect();
        if self.query_pairs.iter().any(|p| support.contains(&key(p))) {
            return Err(MlreError::Contract("support and query pairs overlap".into()));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |s: String| {
            out.push_str(&s);
            out.push('\n');
        };
        line(
            serde_json::to_string(&Header {
                format: DATASET_FORMAT.into(),
                task_id: self.task_id.clone(),
                seed: self.seed,
                n_trajectories: self.trajectories.len(),
                n_support: self.support_pairs.len(),
                n_query: self.query_pairs.len(),
            })
            .expect("header serializes"),
        );
        for t in &self.trajectories {
            line(serde_json::to_string(t).expect("trajectory serializes"));
        }
        line(
            serde_json::to_string(&Section {
                section: "pairs".into(),
            })
            .expect("section serializes"),
        );
        let records = self
            .support_pairs
            .iter()
            .map(|p| (Split::Support, p))
            .chain(self.query_pairs.iter().map(|p| (Split::Query, p)));
        for (split, p) in records {
            line(
                serde_json::to_string(&PairRecord {
                    split,
                    low: p.low,
                    high: p.high,
                    margin: p.margin,
                })
                .expect("pair serializes"),
            );
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let err = |line: usize, e: String| MlreError::parse(format!("dataset line {}", line + 1), e);
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| MlreError::parse("dataset", "empty file"))?;
        let header: Header = serde_json::from_str(first).map_err(|e| err(0, e.to_string()))?;
        if header.format != DATASET_FORMAT {
            return Err(MlreError::parse(
                "dataset",
                format!("unsupported format `{}`", header.format),
            ));
        }
        let mut trajectories = Vec::with_capacity(header.n_trajectories);
        for _ in 0..header.n_trajectories {
            let (i, l) = lines
                .next()
                .ok_or_else(|| MlreError::parse("dataset", "truncated trajectories"))?;
            trajectories.push(serde_json::from_str(l).map_err(|e| err(i, e.to_string()))?);
        }
        let (i, l) = lines
            .next()
            .ok_or_else(|| MlreError::parse("dataset", "missing pairs section"))?;
        let section: Section = serde_json::from_str(l).map_err(|e| err(i, e.to_string()))?;
        if section.section != "pairs" {
            return Err(err(i, format!("expected pairs section, found `{}`", section.section)));
        }
        let (mut support_pairs, mut query_pairs) = (Vec::new(), Vec::new());
        for (i, l) in lines {
            if l.is_empty() {
                continue;
            }
            let r: PairRecord = serde_json::from_str(l).map_err(|e| err(i, e.to_string()))?;
            let p = RankedPair {
                low: r.low,
                high: r.high,
                margin: r.margin,
            };
            match r.split {
                Split::Support => support_pairs.push(p),
                Split::Query => query_pairs.push(p),
            }
        }
        if support_pairs.len() != header.n_support || query_pairs.len() != header.n_query {
            return Err(MlreError::parse("dataset", "pair counts disagree with header"));
        }
        let ds = PairDataset {
            task_id: header.task_id,
            seed: header.seed,
            trajectories,
            support_pairs,
            query_pairs,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&crate::io::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{FeatureMap, MdpSpec, TaskDistribution, Terminal, TerminalKind};

    fn traj_with_return(r: f64) -> Trajectory {
        Trajectory {
            task_id: "t".into(),
            states: vec![0, 1],
            actions: vec![0],
            features: vec![vec![0.0], vec![r]],
            true_return: r,
            true_sum: r,
            length: 1,
            one_life: false,
        }
    }

    #[test]
    fn forced_ordering_single_pair() {
        let ds = build_pairs(vec![traj_with_return(2.0), traj_with_return(1.0)], 1, 0.8, 0).unwrap();
        assert_eq!(ds.support_pairs.len(), 1);
        let p = ds.support_pairs[0];
        assert_eq!(ds.trajectories[p.low].true_sum, 1.0);
        assert_eq!(ds.trajectories[p.high].true_sum, 2.0);
        assert_eq!(p.margin, 1.0);
    }

    #[test]
    fn ties_only_is_an_error() {
        let err = build_pairs(vec![traj_with_return(1.0), traj_with_return(1.0)], 5, 0.8, 0);
        assert!(matches!(err, Err(MlreError::NoOrderedPairs(2))));
    }

    #[test]
    fn split_sizes_follow_support_fraction() {
        let trajs: Vec<_> = (0..60).map(|i| traj_with_return(i as f64)).collect();
        let ds = build_pairs(trajs, 1000, 0.8, 3).unwrap();
        assert_eq!(ds.support_pairs.len(), 800);
        assert_eq!(ds.query_pairs.len(), 200);
        ds.validate().unwrap();
        let trajs: Vec<_> = (0..60).map(|i| traj_with_return(i as f64)).collect();
        let ds = build_pairs(trajs, 50, 0.8, 3).unwrap();
        assert_eq!((ds.support_pairs.len(), ds.query_pairs.len()), (40, 10));
    }

    #[test]
    fn fewer_pairs_than_requested_uses_all() {
        let trajs: Vec<_> = (0..4).map(|i| traj_with_return(i as f64)).collect();
        let ds = build_pairs(trajs, 1000, 0.5, 1).unwrap();
        assert_eq!(ds.support_pairs.len() + ds.query_pairs.len(), 6);
    }

    fn pit_corridor() -> TaskSpec {
        // cells: 0 pit | 1 start | 2 open; no goal
        let mdp = MdpSpec::new(
            3,
            1,
            0.9,
            7,
            vec![Terminal {
                cell: 0,
                kind: TerminalKind::Pit,
            }],
            0.0,
            vec![0.0, 1.0, 0.0],
        )
        .unwrap();
        let f = FeatureMap::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]], 1.0).unwrap();
        TaskSpec::new(mdp, f, vec![-0.5, 0.25], "pit").unwrap()
    }

    #[test]
    fn immediate_death_has_length_one() {
        let task = pit_corridor();
        let policy = TabularPolicy::deterministic(&[0, 3, 3]);
        let mut rng = seed::rng(0, 0);
        for t in collect_one_life(&task, &policy, 10, &mut rng).unwrap() {
            assert_eq!(t.length, 1);
            assert!(t.one_life);
            assert_eq!(t.states, vec![1, 0]);
        }
    }

    #[test]
    fn no_pits_means_no_one_life_flag() {
        let task = pit_corridor();
        // always move right: never reaches the pit, runs to the horizon
        let policy = TabularPolicy::deterministic(&[1, 1, 1]);
        let mut rng = seed::rng(0, 1);
        for t in collect_one_life(&task, &policy, 5, &mut rng).unwrap() {
            assert!(!t.one_life);
            assert_eq!(t.length, task.mdp().horizon());
            t.validate().unwrap();
            let (ret, sum) = t.recompute_returns(task.w_star(), 0.9);
            assert!((ret - t.true_return).abs() < 1e-10);
            assert!((sum - t.true_sum).abs() < 1e-10);
        }
    }

    #[test]
    fn no_post_pit_transitions_on_default_task() {
        let task = TaskDistribution::default().sample_task(0);
        let trajs = collect_pool(&task, &[0.5, 1.0], 200, 4).unwrap();
        for t in &trajs {
            for (i, &s) in t.states.iter().enumerate() {
                if task.mdp().is_terminal(s) {
                    assert_eq!(i, t.length, "transition after absorption");
                }
            }
        }
    }

    #[test]
    fn epsilon_half_gives_diverse_returns() {
        let task = TaskDistribution::default().sample_task(0);
        let policy = make_demonstrator(&task, 0.5).unwrap();
        let mut rng = seed::rng(9, 9);
        let trajs = collect_one_life(&task, &policy, 50, &mut rng).unwrap();
        let mut returns: Vec<f64> = trajs.iter().map(|t| t.true_return).collect();
        returns.sort_by(f64::total_cmp);
        returns.dedup();
        assert!(returns.len() >= 2);
    }

    #[test]
    fn dataset_jsonl_roundtrip_is_bit_exact() {
        let task = TaskDistribution::default().sample_task(1);
        let trajs = collect_pool(&task, &DEFAULT_DEMO_EPSILONS, 20, 5).unwrap();
        let ds = build_pairs(trajs, 100, 0.8, 5).unwrap();
        let text = ds.to_jsonl();
        let back = PairDataset::from_jsonl(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_jsonl(), text);
        assert!(text.starts_with("{\"format\":\"mlre-ds-1\""));
    }

    #[test]
    fn pool_is_deterministic() {
        let task = TaskDistribution::default().sample_task(1);
        let a = collect_pool(&task, &DEFAULT_DEMO_EPSILONS, 50, 7).unwrap();
        let b = collect_pool(&task, &DEFAULT_DEMO_EPSILONS, 50, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        let da = build_pairs(a, 1000, 0.8, 2).unwrap();
        let db = build_pairs(b, 1000, 0.8, 2).unwrap();
        assert_eq!(da, db);
    }
}
