//! Reward extrapolation, the beyond-demonstrator check and the sufficient
//! condition for beating the demonstrator: if `J_opt − J(D) > ε_Φ + 2‖ε‖∞/(1−γ)`
//! for a linear reward model with `‖ŵ‖₁ ≤ 1`, the generation policy must beat
//! the demonstrations.
//!
//! Returns here count the start state: `J(τ|R) = Σ_{t=0}^{L} γᵗ R(s_t)`, and
//! for a policy `J(π|R) = wᵀΦ_π` with `Φ_π = Σ_t γᵗ E[φ(s_t)]`. A terminal cell
//! contributes once, on the step it is entered.

use serde::{Deserialize, Serialize};

use crate::demos::{collect_one_life, make_demonstrator, Trajectory};
use crate::env::{self, MdpSpec, TabularPolicy, TaskSpec};
use crate::error::{MlreError, Result};
use crate::linalg::{self, Matrix};
use crate::reward_model::RewardNet;
use crate::scalar::Scalar;
use crate::seed;

/// Noise levels of the probe policies: 0, 0.1, …, 1.0.
pub fn probe_epsilons() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub const PROBES_PER_EPSILON: usize = 20;

/// Discounted state occupancy `d` with `(I − γ P̃_πᵀ) d = ρ0`, where `P̃` has
/// terminal rows removed so a terminal is counted once.
pub fn occupancy(mdp: &MdpSpec, policy: &TabularPolicy) -> Result<Vec<f64>> {
    let n = mdp.n_states();
    if policy.n_states() != n {
        return Err(MlreError::Contract("policy size mismatch".into()));
    }
    let gamma = mdp.gamma();
    let mut a = Matrix::identity(n);
    for s in (0..n).filter(|&s| !mdp.is_terminal(s)) {
        for (act, &pa) in policy.probs(s).iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for (next, p) in mdp.transition_probs(s, act) {
                a.add_at(next, s, -gamma * pa * p);
            }
        }
    }
    let sol = linalg::solve(&a, mdp.rho0())?;
    if sol.residual > 1e-8 {
        return Err(MlreError::NonFinite(format!(
            "occupancy solve residual {:e}",
            sol.residual
        )));
    }
    Ok(sol.x)
}

/// `Φ_π = Σ_s d(s) φ(s)`.
pub fn feature_expectation(task: &TaskSpec, policy: &TabularPolicy) -> Result<Vec<f64>> {
    let d = occupancy(task.mdp(), policy)?;
    let mut phi = vec![0.0; task.features().dim()];
    for (s, &ds) in d.iter().enumerate() {
        for (acc, &f) in phi.iter_mut().zip(task.features().phi(s)) {
            *acc += ds * f;
        }
    }
    Ok(phi)
}

/// `J(π|R)` from arrival values: `ρ0ᵀR + γ ρ0ᵀV`.
pub fn exact_visit_return(mdp: &MdpSpec, rewards: &[f64], policy: &TabularPolicy) -> Result<f64> {
    let v = env::evaluate_exact(mdp, rewards, policy)?;
    let r0: f64 = mdp.rho0().iter().zip(rewards).map(|(p, r)| p * r).sum();
    Ok(r0 + mdp.gamma() * env::start_value(mdp, &v))
}

/// `Σ_{t=0}^{L} γᵗ wᵀφ(s_t)` for one trajectory.
pub fn visit_return(traj: &Trajectory, w: &[f64], gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for phi in &traj.features {
        total += discount * w.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>();
        discount *= gamma;
    }
    total
}

/// `J(D|R*)`: the mean demonstration return.
pub fn demo_return(task: &TaskSpec, demos: &[Trajectory]) -> Result<f64> {
    if demos.is_empty() {
        return Err(MlreError::Contract("no demonstrations".into()));
    }
    let gamma = task.mdp().gamma();
    Ok(demos.iter().map(|t| visit_return(t, task.w_star(), gamma)).sum::<f64>() / demos.len() as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdilResult {
    pub achieved: bool,
    /// `J(π̂|R*) − J(D|R*)`.
    pub margin: f64,
    pub policy_return: f64,
    pub demo_return: f64,
}

pub fn bdil_check(task: &TaskSpec, policy_hat: &TabularPolicy, demos: &[Trajectory]) -> Result<BdilResult> {
    let demo = demo_return(task, demos)?;
    let j = dot(task.w_star(), &feature_expectation(task, policy_hat)?);
    Ok(BdilResult {
        achieved: j > demo,
        margin: j - demo,
        policy_return: j,
        demo_return: demo,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub j_opt: f64,
    pub j_demo: f64,
    pub j_hat: f64,
    pub eps_phi: f64,
    pub eps_inf: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub premise_holds: bool,
    pub bd_achieved: bool,
    /// The reward model is linear in φ with `‖ŵ‖₁ ≤ 1` and no bias, so the
    /// theorem's hypothesis holds literally.
    pub linear_hypothesis: bool,
}

impl Theorem1Report {
    pub fn counterexample(&self) -> bool {
        self.premise_holds && !self.bd_achieved
    }
}

/// Relative margin the premise must clear, so solver roundoff alone never
/// makes it hold.
pub const PREMISE_SLACK: f64 = 1e-9;

pub fn theorem1_report<F: Scalar>(
    task: &TaskSpec,
    reward: &RewardNet<F>,
    policy_hat: &TabularPolicy,
    demos: &[Trajectory],
) -> Result<Theorem1Report> {
    let features = task.features();
    if reward.input_dim() != features.dim() {
        return Err(MlreError::Contract(
            "reward net and task features differ in dimension".into(),
        ));
    }
    let gamma = task.mdp().gamma();
    let plan = env::value_iteration(task, 1e-12)?;
    let phi_opt = feature_expectation(task, &plan.policy())?;
    let phi_hat = feature_expectation(task, policy_hat)?;
    let w = task.w_star();
    let j_opt = dot(w, &phi_opt);
    let j_hat = dot(w, &phi_hat);
    let j_demo = demo_return(task, demos)?;
    let eps_phi = phi_opt
        .iter()
        .zip(&phi_hat)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let mut eps_inf: f64 = 0.0;
    for s in 0..task.n_states() {
        let r_hat = reward.forward_f64(features.phi(s))?.as_f64();
        eps_inf = eps_inf.max((task.true_reward(s) - r_hat).abs());
    }
    let lhs = j_opt - j_demo;
    let rhs = eps_phi + 2.0 * eps_inf / (1.0 - gamma);
    let slack = PREMISE_SLACK * (1.0 + j_opt.abs());
    let linear_hypothesis = reward.is_linear() && {
        let p = reward.params().values();
        let (wv, b) = p.split_at(p.len() - 1);
        b[0] == F::zero() && wv.iter().map(|x| x.as_f64().abs()).sum::<f64>() <= 1.0 + 1e-12
    };
    Ok(Theorem1Report {
        j_opt,
        j_demo,
        j_hat,
        eps_phi,
        eps_inf,
        lhs,
        rhs,
        premise_holds: lhs > rhs + slack,
        bd_achieved: j_hat > j_demo,
        linear_hypothesis,
    })
}

/// Probe trajectories from ε-greedy planners across the full noise range.
pub fn probe_trajectories(task: &TaskSpec, per_epsilon: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, eps) in probe_epsilons().into_iter().enumerate() {
        let policy = make_demonstrator(task, eps)?;
        let mut rng = seed::rng(seed, 0x5052_4f42_0000 + i as u64);
        out.extend(collect_one_life(task, &policy, per_epsilon, &mut rng)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub true_return: f64,
    pub predicted_return: f64,
    pub length: usize,
    pub one_life: bool,
}

/// Correlations are `None` when either axis has zero variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationReport {
    pub points: Vec<ProbePoint>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub demo_return_range: Option<(f64, f64)>,
    /// Probes whose true return exceeds the best demonstration.
    pub n_beyond_demos: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// Predicted `Σ R̂` against the true undiscounted sum for every probe.
pub fn extrapolation_report<F: Scalar>(
    reward: &RewardNet<F>,
    probes: &[Trajectory],
    demos: &[Trajectory],
) -> Result<ExtrapolationReport> {
    if probes.len() < 2 {
        return Err(MlreError::Contract("need at least two probe trajectories".into()));
    }
    let points: Vec<ProbePoint> = probes
        .iter()
        .map(|t| {
            Ok(ProbePoint {
                true_return: t.true_sum,
                predicted_return: reward.traj_return_hat(t)?.as_f64(),
                length: t.length,
                one_life: t.one_life,
            })
        })
        .collect::<Result<_>>()?;
    let truth: Vec<f64> = points.iter().map(|p| p.true_return).collect();
    if truth.iter().all(|&v| v == truth[0]) {
        return Err(MlreError::Contract(
            "probe trajectories share a single true return".into(),
        ));
    }
    let pred: Vec<f64> = points.iter().map(|p| p.predicted_return).collect();
    let demo_return_range = demos
        .iter()
        .map(|t| t.true_sum)
        .fold(None, |acc: Option<(f64, f64)>, v| {
            Some(acc.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v))))
        });
    let n_beyond_demos = demo_return_range.map_or(0, |(_, hi)| truth.iter().filter(|&&v| v > hi).count());
    Ok(ExtrapolationReport {
        pearson: pearson(&truth, &pred),
        spearman: spearman(&truth, &pred),
        points,
        demo_return_range,
        n_beyond_demos,
    })
}

impl ExtrapolationReport {
    pub fn points_csv(&self) -> String {
        let mut out = String::from("true_return,predicted_return,length,one_life\n");
        for p in &self.points {
            out.push_str(&format!(
                "{:.17e},{:.17e},{},{}\n",
                p.true_return, p.predicted_return, p.length, p.one_life
            ));
        }
        out
    }
}

/// Renders an optional correlation, with `undefined` for degenerate variance.
pub fn fmt_corr(c: Option<f64>) -> String {
    c.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskDistribution;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn correlation_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[9.0, 3.0, 1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&x, &[1.0; 4]), None);
    }

    #[test]
    fn gamma_zero_gives_initial_features() {
        let task = TaskDistribution::default().sample_task(3);
        let mdp = MdpSpec::new(
            8,
            8,
            0.0,
            60,
            task.mdp().terminals().to_vec(),
            0.1,
            task.mdp().rho0().to_vec(),
        )
        .unwrap();
        let task = task.with_mdp(mdp).unwrap();
        let phi = feature_expectation(&task, &TabularPolicy::uniform(64)).unwrap();
        let mut expected = vec![0.0; 8];
        for (s, &p) in task.mdp().rho0().iter().enumerate() {
            for (e, f) in expected.iter_mut().zip(task.features().phi(s)) {
                *e += p * f;
            }
        }
        for (a, b) in phi.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn equation_five_routes_agree() {
        let task = TaskDistribution::default().sample_task(4);
        let policy = TabularPolicy::uniform(task.n_states());
        let a = dot(task.w_star(), &feature_expectation(&task, &policy).unwrap());
        let b = exact_visit_return(task.mdp(), &task.true_rewards(), &policy).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn optimal_policy_beats_random_demos() {
        let task = TaskDistribution::default().sample_task(6);
        let random = make_demonstrator(&task, 1.0).unwrap();
        let demos = collect_one_life(&task, &random, 50, &mut seed::rng(1, 1)).unwrap();
        let opt = env::value_iteration(&task, 1e-12).unwrap().policy();
        assert!(bdil_check(&task, &opt, &demos).unwrap().achieved);
    }

    #[test]
    fn probes_cover_all_noise_levels() {
        let task = TaskDistribution::default().sample_task(2);
        let probes = probe_trajectories(&task, 3, 0).unwrap();
        assert_eq!(probes.len(), 33);
        assert_eq!(probe_trajectories(&task, 3, 0).unwrap(), probes);
    }
}
