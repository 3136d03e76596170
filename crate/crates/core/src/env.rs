//! Featurized gridworld MDPs, the task distribution they are drawn from, and
//! exact simulation / planning primitives.
//!
//! Conventions shared by every module:
//!
//! * Reward is a function of the state that is *arrived at*. The discounted
//!   return of a trajectory is `Σ_t γᵗ R(s_{t+1})` with `t = 0` for the first
//!   transition.
//! * Terminal cells (pits and goals) absorb. The arrival reward is paid once;
//!   nothing is earned afterwards.
//! * Exact evaluations are infinite-horizon discounted values. The horizon `T`
//!   bounds collected episodes, not the exact value.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{MlreError, Result};
use crate::linalg::{self, Matrix};
use crate::seed::{self, Rng};

pub const N_ACTIONS: usize = 4;

/// Row/column displacement of each action: up, right, down, left.
const MOVES: [(isize, isize); N_ACTIONS] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

pub const TASK_FORMAT: &str = "mlre-task-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalKind {
    /// One-life failure state.
    Pit,
    /// Successful absorption.
    Goal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terminal {
    pub cell: usize,
    pub kind: TerminalKind,
}

/// Grid dynamics, discounting, horizon and start distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpSpec {
    width: usize,
    height: usize,
    gamma: f64,
    horizon: usize,
    terminals: Vec<Terminal>,
    slip_prob: f64,
    rho0: Vec<f64>,
    kinds: Vec<Option<TerminalKind>>,
    moves: Vec<[usize; N_ACTIONS]>,
}

impl MdpSpec {
    pub fn new(
        width: usize,
        height: usize,
        gamma: f64,
        horizon: usize,
        mut terminals: Vec<Terminal>,
        slip_prob: f64,
        rho0: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(MlreError::config("width/height", "must be positive"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(MlreError::config("gamma", "must lie in [0, 1)"));
        }
        if horizon == 0 {
            return Err(MlreError::config("horizon", "must be positive"));
        }
        if !(0.0..1.0).contains(&slip_prob) {
            return Err(MlreError::config("slip_prob", "must lie in [0, 1)"));
        }
        let n = width * height;
        terminals.sort_by_key(|t| t.cell);
        let mut kinds = vec![None; n];
        for t in &terminals {
            if t.cell >= n {
                return Err(MlreError::config("terminals", format!("cell {} out of range", t.cell)));
            }
            if kinds[t.cell].replace(t.kind).is_some() {
                return Err(MlreError::config("terminals", format!("cell {} listed twice", t.cell)));
            }
        }
        if rho0.len() != n {
            return Err(MlreError::config(
                "rho0",
                format!("expected {n} entries, got {}", rho0.len()),
            ));
        }
        if rho0.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(MlreError::config("rho0", "entries must be finite and non-negative"));
        }
        let total: f64 = rho0.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(MlreError::config("rho0", format!("sums to {total}, not 1")));
        }
        if rho0.iter().zip(&kinds).any(|(&p, k)| p > 0.0 && k.is_some()) {
            return Err(MlreError::config("rho0", "start mass on a terminal cell"));
        }
        let moves = (0..n)
            .map(|s| {
                let (r, c) = ((s / width) as isize, (s % width) as isize);
                let mut out = [s; N_ACTIONS];
                for (a, (dr, dc)) in MOVES.iter().enumerate() {
                    let (nr, nc) = (r + dr, c + dc);
                    // walls keep the agent in place
                    if nr >= 0 && nc >= 0 && (nr as usize) < height && (nc as usize) < width {
                        out[a] = nr as usize * width + nc as usize;
                    }
                }
                out
            })
            .collect();
        Ok(MdpSpec {
            width,
            height,
            gamma,
            horizon,
            terminals,
            slip_prob,
            rho0,
            kinds,
            moves,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn slip_prob(&self) -> f64 {
        self.slip_prob
    }

    pub fn rho0(&self) -> &[f64] {
        &self.rho0
    }

    pub fn terminals(&self) -> &[Terminal] {
        &self.terminals
    }

    pub fn terminal_kind(&self, s: usize) -> Option<TerminalKind> {
        self.kinds[s]
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.kinds[s].is_some()
    }

    /// Cell reached by a non-slipping move.
    pub fn intended_next(&self, s: usize, a: usize) -> usize {
        self.moves[s][a]
    }

    /// Copy of this MDP with a different horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(MlreError::config("horizon", "must be positive"));
        }
        Ok(MdpSpec {
            horizon,
            ..self.clone()
        })
    }

    /// `P(·|s, a)` as `(cell, probability)` pairs sorted by cell, duplicates merged.
    /// Terminal cells self-loop.
    pub fn transition_probs(&self, s: usize, a: usize) -> Vec<(usize, f64)> {
        if self.is_terminal(s) {
            return vec![(s, 1.0)];
        }
        let slip = self.slip_prob / N_ACTIONS as f64;
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(N_ACTIONS);
        for b in 0..N_ACTIONS {
            let p = if b == a { 1.0 - self.slip_prob + slip } else { slip };
            if p == 0.0 {
                continue;
            }
            let next = self.moves[s][b];
            match out.iter_mut().find(|(c, _)| *c == next) {
                Some(entry) => entry.1 += p,
                None => out.push((next, p)),
            }
        }
        out.sort_by_key(|&(c, _)| c);
        out
    }

    /// Samples `s' ~ P(·|s, a)`.
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut Rng) -> Result<usize> {
        if self.is_terminal(s) {
            return Err(MlreError::Contract(format!("stepping absorbed state {s}")));
        }
        if a >= N_ACTIONS {
            return Err(MlreError::Contract(format!("action {a} out of range")));
        }
        let taken = if self.slip_prob > 0.0 && rng.gen::<f64>() < self.slip_prob {
            rng.gen_range(0..N_ACTIONS)
        } else {
            a
        };
        Ok(self.moves[s][taken])
    }

    pub fn sample_initial(&self, rng: &mut Rng) -> usize {
        sample_categorical(&self.rho0, rng)
    }

    /// Rollout length after which the discounted tail of rewards bounded by
    /// `reward_bound` is below `1e-12`.
    pub fn evaluation_horizon(&self, reward_bound: f64) -> usize {
        if self.gamma == 0.0 {
            return 1;
        }
        let bound = reward_bound.max(1e-300) / (1.0 - self.gamma);
        let steps = ((1e-12 / bound).ln() / self.gamma.ln()).ceil();
        (steps.max(1.0) as usize).max(self.horizon)
    }
}

pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Deterministic state features `φ(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    dim: usize,
    phi_max: f64,
    rows: Vec<Vec<f64>>,
}

impl FeatureMap {
    pub fn new(rows: Vec<Vec<f64>>, phi_max: f64) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(MlreError::config("phi_table", "feature dimension must be positive"));
        }
        for (s, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(MlreError::config(
                    "phi_table",
                    format!("row {s} has length {}", r.len()),
                ));
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(MlreError::config("phi_table", format!("row {s} is not finite")));
            }
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > phi_max + 1e-12 {
                return Err(MlreError::config(
                    "phi_table",
                    format!("row {s} has norm {norm} above phi_max {phi_max}"),
                ));
            }
        }
        Ok(FeatureMap { dim, phi_max, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn phi_max(&self) -> f64 {
        self.phi_max
    }

    pub fn phi(&self, s: usize) -> &[f64] {
        &self.rows[s]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// One task of the distribution: dynamics, features and hidden reward weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    mdp: MdpSpec,
    features: FeatureMap,
    w_star: Vec<f64>,
    task_id: String,
}

/// Outcome of one environment step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub next: usize,
    pub reward: f64,
    /// The next state is terminal.
    pub absorbed: bool,
}

impl TaskSpec {
    pub fn new(mdp: MdpSpec, features: FeatureMap, w_star: Vec<f64>, task_id: impl Into<String>) -> Result<Self> {
        if features.rows.len() != mdp.n_states() {
            return Err(MlreError::config(
                "phi_table",
                format!("{} rows for {} states", features.rows.len(), mdp.n_states()),
            ));
        }
        if w_star.len() != features.dim {
            return Err(MlreError::config(
                "w_star",
                format!(
                    "length {} does not match feature dimension {}",
                    w_star.len(),
                    features.dim
                ),
            ));
        }
        if w_star.iter().any(|w| !w.is_finite()) {
            return Err(MlreError::config("w_star", "must be finite"));
        }
        let l1: f64 = w_star.iter().map(|w| w.abs()).sum();
        if l1 > 1.0 + 1e-12 {
            return Err(MlreError::config("w_star", format!("L1 norm {l1} exceeds 1")));
        }
        Ok(TaskSpec {
            mdp,
            features,
            w_star,
            task_id: task_id.into(),
        })
    }

    pub fn mdp(&self) -> &MdpSpec {
        &self.mdp
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn w_star(&self) -> &[f64] {
        &self.w_star
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    /// `R*(s) = w*ᵀφ(s)`.
    pub fn true_reward(&self, s: usize) -> f64 {
        self.w_star.iter().zip(self.features.phi(s)).map(|(w, x)| w * x).sum()
    }

    pub fn true_rewards(&self) -> Vec<f64> {
        (0..self.n_states()).map(|s| self.true_reward(s)).collect()
    }

    /// View of the task without access to the hidden reward.
    pub fn reward_free(&self) -> RewardFreeTask<'_> {
        RewardFreeTask {
            mdp: &self.mdp,
            features: &self.features,
        }
    }

    pub fn with_mdp(&self, mdp: MdpSpec) -> Result<Self> {
        TaskSpec::new(mdp, self.features.clone(), self.w_star.clone(), self.task_id.clone())
    }

    pub fn step(&self, state: usize, action: usize, rng: &mut Rng) -> Result<Transition> {
        let next = self.mdp.sample_next(state, action, rng)?;
        Ok(Transition {
            next,
            reward: self.true_reward(next),
            absorbed: self.mdp.is_terminal(next),
        })
    }

    pub fn to_json(&self) -> String {
        let file = TaskFile {
            format: TASK_FORMAT.to_string(),
            task_id: self.task_id.clone(),
            width: self.mdp.width,
            height: self.mdp.height,
            gamma: self.mdp.gamma,
            horizon: self.mdp.horizon,
            terminals: self.mdp.terminals.clone(),
            slip_prob: self.mdp.slip_prob,
            rho0: self.mdp.rho0.clone(),
            phi_max: self.features.phi_max,
            phi_table: self.features.rows.clone(),
            w_star: self.w_star.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("task serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TaskFile = serde_json::from_str(text).map_err(|e| MlreError::parse("task file", e.to_string()))?;
        if file.format != TASK_FORMAT {
            return Err(MlreError::parse(
                "task file",
                format!("unsupported format `{}`", file.format),
            ));
        }
        let mdp = MdpSpec::new(
            file.width,
            file.height,
            file.gamma,
            file.horizon,
            file.terminals,
            file.slip_prob,
            file.rho0,
        )?;
        let features = FeatureMap::new(file.phi_table, file.phi_max)?;
        TaskSpec::new(mdp, features, file.w_star, file.task_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::io::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct TaskFile {
    format: String,
    task_id: String,
    width: usize,
    height: usize,
    gamma: f64,
    horizon: usize,
    terminals: Vec<Terminal>,
    slip_prob: f64,
    rho0: Vec<f64>,
    phi_max: f64,
    phi_table: Vec<Vec<f64>>,
    w_star: Vec<f64>,
}

/// Dynamics and features of a task with the ground-truth reward hidden.
#[derive(Clone, Copy, Debug)]
pub struct RewardFreeTask<'a> {
    mdp: &'a MdpSpec,
    features: &'a FeatureMap,
}

impl<'a> RewardFreeTask<'a> {
    pub fn mdp(&self) -> &'a MdpSpec {
        self.mdp
    }

    pub fn features(&self) -> &'a FeatureMap {
        self.features
    }
}

/// Stochastic tabular policy `π(a|s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    probs: Vec<[f64; N_ACTIONS]>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<[f64; N_ACTIONS]>) -> Result<Self> {
        for (s, row) in probs.iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(MlreError::Contract(format!("policy row {s} has invalid probabilities")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(MlreError::Contract(format!("policy row {s} sums to {total}")));
            }
        }
        Ok(TabularPolicy { probs })
    }

    pub fn uniform(n_states: usize) -> Self {
        TabularPolicy {
            probs: vec![[1.0 / N_ACTIONS as f64; N_ACTIONS]; n_states],
        }
    }

    pub fn deterministic(actions: &[usize]) -> Self {
        Self::epsilon_greedy(actions, 0.0)
    }

    /// `(1 − ε)` on the given action plus `ε` spread uniformly.
    pub fn epsilon_greedy(actions: &[usize], epsilon: f64) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = [epsilon / N_ACTIONS as f64; N_ACTIONS];
                row[a] += 1.0 - epsilon;
                row
            })
            .collect();
        TabularPolicy { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self, s: usize) -> &[f64; N_ACTIONS] {
        &self.probs[s]
    }

    pub fn sample(&self, s: usize, rng: &mut Rng) -> usize {
        sample_categorical(&self.probs[s], rng)
    }

    /// Mean policy entropy over the given states.
    pub fn mean_entropy(&self, states: impl IntoIterator<Item = usize>) -> f64 {
        let (mut total, mut count) = (0.0, 0usize);
        for s in states {
            total -= self.probs[s]
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// Value iteration output: optimal arrival-reward values and greedy policy.
#[derive(Clone, Debug)]
pub struct Plan {
    pub values: Vec<f64>,
    pub greedy: Vec<usize>,
    pub residual: f64,
}

impl Plan {
    pub fn policy(&self) -> TabularPolicy {
        TabularPolicy::deterministic(&self.greedy)
    }
}

fn q_values(mdp: &MdpSpec, rewards: &[f64], values: &[f64], s: usize) -> [f64; N_ACTIONS] {
    let mut q = [0.0; N_ACTIONS];
    for (a, qa) in q.iter_mut().enumerate() {
        *qa = mdp
            .transition_probs(s, a)
            .into_iter()
            .map(|(next, p)| p * (rewards[next] + mdp.gamma * values[next]))
            .sum();
    }
    q
}

/// Optimal values for the task's ground-truth reward.
pub fn value_iteration(task: &TaskSpec, tol: f64) -> Result<Plan> {
    value_iteration_with_rewards(task.mdp(), &task.true_rewards(), tol)
}

/// Value iteration for an arbitrary state reward table. The sup-norm Bellman
/// residual of the returned values is below `tol`; greedy ties go to the lowest
/// action index.
pub fn value_iteration_with_rewards(mdp: &MdpSpec, rewards: &[f64], tol: f64) -> Result<Plan> {
    if !(tol > 0.0) {
        return Err(MlreError::config("tol", "must be positive"));
    }
    if rewards.len() != mdp.n_states() {
        return Err(MlreError::Contract("reward table size mismatch".into()));
    }
    let n = mdp.n_states();
    let mut values = vec![0.0; n];
    loop {
        let mut next = vec![0.0; n];
        let mut change: f64 = 0.0;
        for s in 0..n {
            if mdp.is_terminal(s) {
                continue;
            }
            let q = q_values(mdp, rewards, &values, s);
            next[s] = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            change = change.max((next[s] - values[s]).abs());
        }
        values = next;
        if !change.is_finite() {
            return Err(MlreError::NonFinite("value iteration".into()));
        }
        if change < tol {
            break;
        }
    }
    let mut residual: f64 = 0.0;
    let mut qs = Vec::with_capacity(n);
    for s in 0..n {
        let q = if mdp.is_terminal(s) {
            [0.0; N_ACTIONS]
        } else {
            q_values(mdp, rewards, &values, s)
        };
        if !mdp.is_terminal(s) {
            let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((best - values[s]).abs());
        }
        qs.push(q);
    }
    // Scale-covariant tie tolerance keeps the greedy policy invariant under
    // positive rescaling of the reward.
    let q_scale = qs.iter().flatten().fold(0.0f64, |m, q| m.max(q.abs()));
    let tie = 1e-9 * q_scale;
    let greedy = qs
        .iter()
        .map(|q| {
            let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            q.iter().position(|&v| v >= best - tie).unwrap_or(0)
        })
        .collect();
    Ok(Plan {
        values,
        greedy,
        residual,
    })
}

/// Exact arrival-reward values `V = r_π + γ P_π V` (terminals fixed at 0).
pub fn evaluate_exact(mdp: &MdpSpec, rewards: &[f64], policy: &TabularPolicy) -> Result<Vec<f64>> {
    let n = mdp.n_states();
    if rewards.len() != n || policy.n_states() != n {
        return Err(MlreError::Contract("policy/reward size mismatch".into()));
    }
    let mut a = Matrix::identity(n);
    let mut b = vec![0.0; n];
    for s in 0..n {
        if mdp.is_terminal(s) {
            continue;
        }
        for (act, &pa) in policy.probs(s).iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for (next, p) in mdp.transition_probs(s, act) {
                b[s] += pa * p * rewards[next];
                if !mdp.is_terminal(next) {
                    a.add_at(s, next, -mdp.gamma * pa * p);
                }
            }
        }
    }
    let sol = linalg::solve(&a, &b)?;
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if sol.residual > 1e-8 * scale {
        return Err(MlreError::NonFinite(format!(
            "policy evaluation residual {}",
            sol.residual
        )));
    }
    Ok(sol.x)
}

/// `ρ0ᵀ V`.
pub fn start_value(mdp: &MdpSpec, values: &[f64]) -> f64 {
    mdp.rho0.iter().zip(values).map(|(p, v)| p * v).sum()
}

/// Exact expected discounted arrival return of `policy` under `rewards`.
pub fn exact_return(mdp: &MdpSpec, rewards: &[f64], policy: &TabularPolicy) -> Result<f64> {
    Ok(start_value(mdp, &evaluate_exact(mdp, rewards, policy)?))
}

/// Discounted arrival return of one rollout of at most `max_steps` transitions.
pub fn rollout_return(mdp: &MdpSpec, rewards: &[f64], policy: &TabularPolicy, max_steps: usize, rng: &mut Rng) -> f64 {
    let mut s = mdp.sample_initial(rng);
    let (mut ret, mut discount) = (0.0, 1.0);
    for _ in 0..max_steps {
        let a = policy.sample(s, rng);
        let next = mdp.sample_next(s, a, rng).expect("non-terminal state");
        ret += discount * rewards[next];
        discount *= mdp.gamma;
        if mdp.is_terminal(next) {
            break;
        }
        s = next;
    }
    ret
}

/// Sample mean and standard error.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// Task distribution

pub const DEFAULT_FEATURE_DIM: usize = 8;

/// Upper bound on `‖φ(s)‖₂` for the default feature family.
pub const DEFAULT_PHI_MAX: f64 = 2.0;

/// Shared layout family of the task distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutTemplate {
    pub width: usize,
    pub height: usize,
    pub n_pits: usize,
    pub n_lava: usize,
    /// Start cells are at least this Manhattan distance from the goal.
    pub min_start_distance: usize,
    /// Whether entering the goal ends the episode. When false the goal is an
    /// ordinary high-reward cell and return accrues for as long as the agent
    /// survives.
    pub goal_absorbing: bool,
    pub slip_prob: f64,
    pub gamma: f64,
    pub horizon: usize,
}

impl Default for LayoutTemplate {
    fn default() -> Self {
        LayoutTemplate {
            width: 8,
            height: 8,
            n_pits: 4,
            n_lava: 6,
            min_start_distance: 6,
            goal_absorbing: false,
            slip_prob: 0.1,
            gamma: 0.95,
            horizon: 60,
        }
    }
}

/// How `w*` is drawn: each base weight is scaled by `1 + jitter·U(−1, 1)`, then
/// the vector is rescaled to an L1 norm drawn from `l1_range`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightRule {
    pub base: Vec<f64>,
    pub jitter: f64,
    pub l1_range: (f64, f64),
}

impl Default for WeightRule {
    fn default() -> Self {
        // goal, dist 1-2, dist 3-5, dist 6-9, dist 10+, pit-adjacent, lava, pit
        WeightRule {
            base: vec![0.30, 0.20, 0.12, 0.06, 0.02, -0.05, -0.10, -0.15],
            jitter: 0.4,
            l1_range: (0.8, 1.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDistribution {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub template: LayoutTemplate,
    #[serde(default)]
    pub weights: WeightRule,
}

impl TaskDistribution {
    pub fn validate(&self) -> Result<()> {
        let t = &self.template;
        let cells = t.width * t.height;
        if t.width == 0 || t.height == 0 {
            return Err(MlreError::config("task_distribution.template", "empty grid"));
        }
        if t.n_pits + t.n_lava + 2 > cells {
            return Err(MlreError::config(
                "task_distribution.template",
                "too many pits/lava for grid",
            ));
        }
        if !(0.0..1.0).contains(&t.gamma) || !(0.0..1.0).contains(&t.slip_prob) || t.horizon == 0 {
            return Err(MlreError::config(
                "task_distribution.template",
                "gamma and slip_prob must lie in [0,1), horizon positive",
            ));
        }
        let w = &self.weights;
        if w.base.len() != DEFAULT_FEATURE_DIM {
            return Err(MlreError::config(
                "task_distribution.weights.base",
                format!("expected {DEFAULT_FEATURE_DIM} entries"),
            ));
        }
        if !(0.0..=1.0).contains(&w.jitter) {
            return Err(MlreError::config(
                "task_distribution.weights.jitter",
                "must lie in [0,1]",
            ));
        }
        let (lo, hi) = w.l1_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(MlreError::config(
                "task_distribution.weights.l1_range",
                "need 0 < lo <= hi <= 1",
            ));
        }
        Ok(())
    }

    /// Deterministic in `(self, seed)`.
    pub fn sample_task(&self, seed: u64) -> TaskSpec {
        self.validate().expect("valid task distribution");
        let t = &self.template;
        let mut rng = seed::rng(self.seed, seed);
        let n = t.width * t.height;

        let mut cells: Vec<usize> = (0..n).collect();
        // partial Fisher-Yates: goal, pits, lava
        let needed = 1 + t.n_pits + t.n_lava;
        for i in 0..needed {
            let j = rng.gen_range(i..n);
            cells.swap(i, j);
        }
        let goal = cells[0];
        let pits = &cells[1..1 + t.n_pits];
        let lava = &cells[1 + t.n_pits..needed];

        let mut terminals = Vec::new();
        if t.goal_absorbing {
            terminals.push(Terminal {
                cell: goal,
                kind: TerminalKind::Goal,
            });
        }
        terminals.extend(pits.iter().map(|&cell| Terminal {
            cell,
            kind: TerminalKind::Pit,
        }));

        let dist = |s: usize| {
            let (r, c) = (s / t.width, s % t.width);
            let (gr, gc) = (goal / t.width, goal % t.width);
            r.abs_diff(gr) + c.abs_diff(gc)
        };
        let is_terminal = |s: usize| (t.goal_absorbing && s == goal) || pits.contains(&s);
        let mut starts: Vec<usize> = (0..n)
            .filter(|&s| !is_terminal(s) && dist(s) >= t.min_start_distance)
            .collect();
        if starts.is_empty() {
            starts = (0..n).filter(|&s| !is_terminal(s)).collect();
        }
        let mut rho0 = vec![0.0; n];
        for &s in &starts {
            rho0[s] = 1.0 / starts.len() as f64;
        }
        let total: f64 = rho0.iter().sum();
        // renormalize against accumulated rounding
        rho0.iter_mut().for_each(|p| *p /= total);

        let rows = default_features(t.width, t.height, goal, pits, lava);
        let features = FeatureMap::new(rows, DEFAULT_PHI_MAX).expect("default features within bound");

        let w = &self.weights;
        let mut w_star: Vec<f64> = w
            .base
            .iter()
            .map(|&b| b * (1.0 + w.jitter * rng.gen_range(-1.0..=1.0)))
            .collect();
        let l1: f64 = w_star.iter().map(|x| x.abs()).sum();
        let target = if w.l1_range.0 < w.l1_range.1 {
            rng.gen_range(w.l1_range.0..=w.l1_range.1)
        } else {
            w.l1_range.0
        };
        if l1 > 0.0 {
            // (1 - 1e-12) keeps the L1 bound strict under rounding
            let scale = target * (1.0 - 1e-12) / l1;
            w_star.iter_mut().for_each(|x| *x *= scale);
        }

        let mdp = MdpSpec::new(t.width, t.height, t.gamma, t.horizon, terminals, t.slip_prob, rho0)
            .expect("valid sampled MDP");
        TaskSpec::new(mdp, features, w_star, format!("task-{seed}")).expect("valid sampled task")
    }
}

/// Distance-to-goal bucket one-hots (0, 1–2, 3–5, 6–9, 10+), pit adjacency,
/// lava and pit indicators.
pub fn default_features(width: usize, height: usize, goal: usize, pits: &[usize], lava: &[usize]) -> Vec<Vec<f64>> {
    let n = width * height;
    let coords = |s: usize| (s / width, s % width);
    (0..n)
        .map(|s| {
            let mut phi = vec![0.0; DEFAULT_FEATURE_DIM];
            let (r, c) = coords(s);
            let (gr, gc) = coords(goal);
            let d = r.abs_diff(gr) + c.abs_diff(gc);
            let bucket = match d {
                0 => 0,
                1..=2 => 1,
                3..=5 => 2,
                6..=9 => 3,
                _ => 4,
            };
            phi[bucket] = 1.0;
            let adjacent = pits.iter().any(|&p| {
                let (pr, pc) = coords(p);
                pr.abs_diff(r) + pc.abs_diff(c) == 1
            });
            if adjacent {
                phi[5] = 1.0;
            }
            if lava.contains(&s) {
                phi[6] = 1.0;
            }
            if pits.contains(&s) {
                phi[7] = 1.0;
            }
            phi
        })
        .collect()
}
