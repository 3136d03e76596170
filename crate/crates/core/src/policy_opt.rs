//! Clipped-surrogate actor-critic (PPO) over a tabular softmax policy, trained
//! on a learned state reward.
//!
//! The trainer only sees a [`RewardFreeTask`]; ground-truth returns reach the
//! learning curve through a caller-supplied evaluation callback.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{self, MdpSpec, RewardFreeTask, TabularPolicy, TaskSpec, N_ACTIONS};
use crate::error::{MlreError, Result};
use crate::optim::Adam;
use crate::reward_model::RewardNet;
use crate::scalar::Scalar;
use crate::seed::{self, Rng};
use crate::weights::{Block, WeightsFile};

pub const POLICY_KIND: &str = "policy-tabular";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    /// Gradients are clipped elementwise to `[−grad_clip, grad_clip]`.
    pub grad_clip: f64,
    pub rollout_steps: usize,
    pub epochs_per_update: usize,
    pub minibatch_size: usize,
    pub total_env_steps: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            learning_rate: 0.0025,
            value_coef: 0.5,
            entropy_coef: 0.01,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            grad_clip: 5.0,
            rollout_steps: 2048,
            epochs_per_update: 4,
            minibatch_size: 256,
            total_env_steps: 400_000,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ppo.learning_rate", self.learning_rate),
            ("ppo.clip_ratio", self.clip_ratio),
            ("ppo.grad_clip", self.grad_clip),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MlreError::config(key, "must be positive"));
            }
        }
        for (key, v) in [
            ("ppo.value_coef", self.value_coef),
            ("ppo.entropy_coef", self.entropy_coef),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MlreError::config(key, "must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(MlreError::config("ppo.gae_lambda", "must lie in [0, 1]"));
        }
        let counts = [
            ("ppo.rollout_steps", self.rollout_steps),
            ("ppo.epochs_per_update", self.epochs_per_update),
            ("ppo.minibatch_size", self.minibatch_size),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(MlreError::config(key, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Softmax logits and a state-value table.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub logits: Vec<[f64; N_ACTIONS]>,
    pub values: Vec<f64>,
}

fn softmax(z: &[f64; N_ACTIONS]) -> [f64; N_ACTIONS] {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; N_ACTIONS];
    let mut total = 0.0;
    for (pi, &zi) in p.iter_mut().zip(z) {
        *pi = (zi - m).exp();
        total += *pi;
    }
    p.iter_mut().for_each(|x| *x /= total);
    p
}

fn log_softmax(z: &[f64; N_ACTIONS]) -> [f64; N_ACTIONS] {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    let mut out = [0.0; N_ACTIONS];
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
    out
}

impl PolicyNet {
    /// Uniform policy, zero values.
    pub fn new(n_states: usize) -> Self {
        PolicyNet {
            logits: vec![[0.0; N_ACTIONS]; n_states],
            values: vec![0.0; n_states],
        }
    }

    pub fn n_states(&self) -> usize {
        self.values.len()
    }

    pub fn n_params(&self) -> usize {
        self.n_states() * (N_ACTIONS + 1)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.logits
            .iter()
            .flatten()
            .cloned()
            .chain(self.values.iter().cloned())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let n = self.n_states();
        assert_eq!(flat.len(), n * (N_ACTIONS + 1), "flat policy parameter length");
        for (s, row) in self.logits.iter_mut().enumerate() {
            row.copy_from_slice(&flat[s * N_ACTIONS..(s + 1) * N_ACTIONS]);
        }
        self.values.copy_from_slice(&flat[n * N_ACTIONS..]);
    }

    pub fn probs(&self, s: usize) -> [f64; N_ACTIONS] {
        softmax(&self.logits[s])
    }

    pub fn policy(&self) -> TabularPolicy {
        TabularPolicy::new((0..self.n_states()).map(|s| self.probs(s)).collect())
            .expect("softmax rows are distributions")
    }

    pub fn to_weights_file(&self) -> WeightsFile {
        WeightsFile {
            kind: POLICY_KIND.into(),
            manifest: vec![self.n_states(), N_ACTIONS],
            blocks: vec![
                Block {
                    name: "logits".into(),
                    rows: self.n_states(),
                    cols: N_ACTIONS,
                    data: self.logits.iter().flatten().cloned().collect(),
                },
                Block {
                    name: "values".into(),
                    rows: 1,
                    cols: self.n_states(),
                    data: self.values.clone(),
                },
            ],
        }
    }

    pub fn from_weights_file(file: &WeightsFile) -> Result<Self> {
        if file.kind != POLICY_KIND || file.manifest.len() != 2 || file.manifest[1] != N_ACTIONS {
            return Err(MlreError::parse("policy weights", "not a tabular policy checkpoint"));
        }
        let n = file.manifest[0];
        let logits = file.block("logits")?;
        let values = file.block("values")?;
        if logits.data.len() != n * N_ACTIONS || values.data.len() != n {
            return Err(MlreError::parse("policy weights", "block sizes do not match manifest"));
        }
        let mut net = PolicyNet::new(n);
        let mut flat = logits.data.clone();
        flat.extend_from_slice(&values.data);
        net.set_flat(&flat);
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weights_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weights_file(&WeightsFile::load(path)?)
    }
}

/// Generalized advantage estimates. `next_values[t]` is the bootstrap value of
/// the state reached at step `t` (zero when it is absorbing); `segment_end[t]`
/// stops the recursion at episode boundaries.
pub fn gae_advantages<F: Scalar>(
    rewards: &[F],
    values: &[F],
    next_values: &[F],
    segment_end: &[bool],
    gamma: F,
    lambda: F,
) -> Result<Vec<F>> {
    let n = rewards.len();
    if values.len() != n || next_values.len() != n || segment_end.len() != n {
        return Err(MlreError::Contract("GAE inputs differ in length".into()));
    }
    let mut adv = vec![F::zero(); n];
    let mut running = F::zero();
    for t in (0..n).rev() {
        if segment_end[t] {
            running = F::zero();
        }
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    if let Some(t) = adv.iter().position(|a| !a.is_finite()) {
        return Err(MlreError::NonFinite(format!("advantage at step {t}")));
    }
    Ok(adv)
}

/// One transition prepared for the surrogate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub state: usize,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub value_target: f64,
}

/// Which side of the clipped objective each sample takes. Two parameter
/// vectors with equal patterns lie on the same smooth piece of the loss.
pub fn branch_pattern(net: &PolicyNet, batch: &[Sample], clip: f64) -> Vec<bool> {
    batch
        .iter()
        .map(|x| {
            let ratio = (log_softmax(&net.logits[x.state])[x.action] - x.old_log_prob).exp();
            x.advantage * ratio <= x.advantage * ratio.clamp(1.0 - clip, 1.0 + clip)
        })
        .collect()
}

/// Mean over the batch of `−min(ρA, clip(ρ)A) + c_v (V − target)² − c_e H(π(·|s))`
/// and its gradient over [`PolicyNet::flat`] parameters.
pub fn ppo_loss(net: &PolicyNet, batch: &[Sample], cfg: &PpoConfig) -> (f64, Vec<f64>) {
    let n_s = net.n_states();
    let mut grad = vec![0.0; net.n_params()];
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for x in batch {
        let z = &net.logits[x.state];
        let logp = log_softmax(z);
        let p = softmax(z);
        let ratio = (logp[x.action] - x.old_log_prob).exp();
        let clipped = ratio.clamp(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
        let unclipped_active = x.advantage * ratio <= x.advantage * clipped;
        loss -= scale * (x.advantage * ratio).min(x.advantage * clipped);

        let entropy: f64 = -p.iter().zip(&logp).map(|(pi, li)| pi * li).sum::<f64>();
        loss -= scale * cfg.entropy_coef * entropy;

        let dv = net.values[x.state] - x.value_target;
        loss += scale * cfg.value_coef * dv * dv;

        let g = &mut grad[x.state * N_ACTIONS..(x.state + 1) * N_ACTIONS];
        for k in 0..N_ACTIONS {
            let onehot = if k == x.action { 1.0 } else { 0.0 };
            if unclipped_active {
                g[k] -= scale * x.advantage * ratio * (onehot - p[k]);
            }
            // dH/dz_k = −p_k (log p_k + H)
            g[k] += scale * cfg.entropy_coef * p[k] * (logp[k] + entropy);
        }
        grad[n_s * N_ACTIONS + x.state] += scale * 2.0 * cfg.value_coef * dv;
    }
    (loss, grad)
}

/// Elementwise clip applied before every update.
pub fn clip_gradient(grad: &mut [f64], bound: f64) {
    grad.iter_mut().for_each(|g| *g = g.clamp(-bound, bound));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub update: usize,
    pub env_steps: usize,
    pub mean_learned_return: f64,
    pub mean_true_return: f64,
    pub entropy: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("update,env_steps,mean_learned_return,mean_true_return,entropy\n");
    for c in curve {
        out.push_str(&format!(
            "{},{},{:.17e},{:.17e},{:.17e}\n",
            c.update, c.env_steps, c.mean_learned_return, c.mean_true_return, c.entropy
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainedPolicy {
    pub net: PolicyNet,
    pub curve: Vec<CurvePoint>,
}

/// Observations passed to the update hook after clipping.
#[derive(Clone, Debug)]
pub struct UpdateInfo<'a> {
    pub update: usize,
    pub clipped_grad: &'a [f64],
}

struct Rollout {
    samples: Vec<Sample>,
}

fn collect_rollout(mdp: &MdpSpec, rewards: &[f64], net: &PolicyNet, cfg: &PpoConfig, rng: &mut Rng) -> Result<Rollout> {
    let n = cfg.rollout_steps;
    let (mut states, mut actions, mut logps) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut rs, mut vs, mut next_vs, mut ends) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let mut s = mdp.sample_initial(rng);
    let mut t = 0;
    for i in 0..n {
        let probs = net.probs(s);
        let a = crate::env::sample_categorical(&probs, rng);
        let next = mdp.sample_next(s, a, rng)?;
        let absorbed = mdp.is_terminal(next);
        t += 1;
        let truncated = t >= mdp.horizon() || i + 1 == n;
        states.push(s);
        actions.push(a);
        logps.push(log_softmax(&net.logits[s])[a]);
        rs.push(rewards[next]);
        vs.push(net.values[s]);
        next_vs.push(if absorbed { 0.0 } else { net.values[next] });
        ends.push(absorbed || truncated);
        if absorbed || t >= mdp.horizon() {
            s = mdp.sample_initial(rng);
            t = 0;
        } else {
            s = next;
        }
    }
    let adv = gae_advantages(&rs, &vs, &next_vs, &ends, mdp.gamma(), cfg.gae_lambda)?;
    let targets: Vec<f64> = adv.iter().zip(&vs).map(|(a, v)| a + v).collect();
    let (mean, _) = env::mean_and_stderr(&adv);
    let sd = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / adv.len() as f64).sqrt();
    let samples = (0..n)
        .map(|i| Sample {
            state: states[i],
            action: actions[i],
            old_log_prob: logps[i],
            advantage: (adv[i] - mean) / (sd + 1e-8),
            value_target: targets[i],
        })
        .collect();
    Ok(Rollout { samples })
}

/// Per-state learned reward table `R̂(φ(s))`.
pub fn reward_table<F: Scalar>(task: &RewardFreeTask<'_>, reward: &RewardNet<F>) -> Result<Vec<f64>> {
    let features = task.features();
    if reward.input_dim() != features.dim() {
        return Err(MlreError::Contract(format!(
            "reward net expects {} features, task provides {}",
            reward.input_dim(),
            features.dim()
        )));
    }
    (0..task.mdp().n_states())
        .map(|s| Ok(reward.forward_f64(features.phi(s))?.as_f64()))
        .collect()
}

/// PPO against the learned reward. `true_return` is called once per update to
/// record the hidden ground-truth return; `on_update` sees every clipped
/// gradient.
pub fn train_policy_with<F, E, H>(
    task: RewardFreeTask<'_>,
    reward: &RewardNet<F>,
    cfg: &PpoConfig,
    true_return: E,
    mut on_update: H,
) -> Result<TrainedPolicy>
where
    F: Scalar,
    E: Fn(&TabularPolicy) -> Result<f64>,
    H: FnMut(&UpdateInfo<'_>),
{
    cfg.validate()?;
    let mdp = task.mdp();
    let rewards = reward_table(&task, reward)?;
    let mut net = PolicyNet::new(mdp.n_states());
    let mut adam = Adam::new(net.n_params());
    let mut curve = Vec::new();
    let updates = cfg.total_env_steps / cfg.rollout_steps;
    let live: Vec<usize> = (0..mdp.n_states()).filter(|&s| !mdp.is_terminal(s)).collect();
    for update in 0..updates {
        let mut rng = seed::rng(cfg.seed, update as u64);
        let mut rollout = collect_rollout(mdp, &rewards, &net, cfg, &mut rng)?;
        for _ in 0..cfg.epochs_per_update {
            rollout.samples.shuffle(&mut rng);
            for batch in rollout.samples.chunks(cfg.minibatch_size) {
                let (_, mut grad) = ppo_loss(&net, batch, cfg);
                clip_gradient(&mut grad, cfg.grad_clip);
                on_update(&UpdateInfo {
                    update,
                    clipped_grad: &grad,
                });
                let mut flat = net.flat();
                adam.step(&mut flat, &grad, cfg.learning_rate);
                net.set_flat(&flat);
            }
        }
        let policy = net.policy();
        curve.push(CurvePoint {
            update: update + 1,
            env_steps: (update + 1) * cfg.rollout_steps,
            mean_learned_return: env::exact_return(mdp, &rewards, &policy)?,
            mean_true_return: true_return(&policy)?,
            entropy: policy.mean_entropy(live.iter().cloned()),
        });
    }
    Ok(TrainedPolicy { net, curve })
}

/// PPO on `reward`; ground-truth returns appear only in the learning curve.
pub fn train_policy<F: Scalar>(task: &TaskSpec, reward: &RewardNet<F>, cfg: &PpoConfig) -> Result<TrainedPolicy> {
    let true_rewards = task.true_rewards();
    let mdp = task.mdp();
    train_policy_with(
        task.reward_free(),
        reward,
        cfg,
        |p| env::exact_return(mdp, &true_rewards, p),
        |_| {},
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub mean_true_return: f64,
    pub stderr_true_return: f64,
    pub mean_learned_return: f64,
    pub exact_true_return: f64,
    pub exact_learned_return: f64,
}

/// Monte-Carlo and exact discounted returns under the true and learned rewards.
pub fn evaluate_policy<F: Scalar>(
    task: &TaskSpec,
    policy: &TabularPolicy,
    reward: &RewardNet<F>,
    episodes: usize,
    rng: &mut Rng,
) -> Result<PolicyEvaluation> {
    if episodes == 0 {
        return Err(MlreError::config("episodes", "must be at least 1"));
    }
    let mdp = task.mdp();
    let truth = task.true_rewards();
    let learned = reward_table(&task.reward_free(), reward)?;
    let bound = truth.iter().chain(&learned).fold(0.0f64, |m, r| m.max(r.abs()));
    let horizon = mdp.evaluation_horizon(bound);
    let mut true_returns = Vec::with_capacity(episodes);
    let mut learned_returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let (t, l) = rollout_pair(mdp, &truth, &learned, policy, horizon, rng);
        true_returns.push(t);
        learned_returns.push(l);
    }
    let (mean_true, stderr_true) = env::mean_and_stderr(&true_returns);
    let (mean_learned, _) = env::mean_and_stderr(&learned_returns);
    Ok(PolicyEvaluation {
        mean_true_return: mean_true,
        stderr_true_return: stderr_true,
        mean_learned_return: mean_learned,
        exact_true_return: env::exact_return(mdp, &truth, policy)?,
        exact_learned_return: env::exact_return(mdp, &learned, policy)?,
    })
}

fn rollout_pair(
    mdp: &MdpSpec,
    a: &[f64],
    b: &[f64],
    policy: &TabularPolicy,
    max_steps: usize,
    rng: &mut Rng,
) -> (f64, f64) {
    let mut s = mdp.sample_initial(rng);
    let (mut ra, mut rb, mut discount) = (0.0, 0.0, 1.0);
    for _ in 0..max_steps {
        let act = policy.sample(s, rng);
        let next = mdp.sample_next(s, act, rng).expect("non-terminal state");
        ra += discount * a[next];
        rb += discount * b[next];
        discount *= mdp.gamma();
        if mdp.is_terminal(next) {
            break;
        }
        s = next;
    }
    (ra, rb)
}
