//! Finite-difference verification of the analytic gradients.
//!
//! Central differences are compared coordinate by coordinate. A coordinate
//! whose `±h` perturbation crosses a rectifier, clamp or absolute-value kink
//! (detected by comparing branch patterns) is skipped and another is drawn.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::demos::{build_pairs, collect_pool, RankedPair, DEFAULT_DEMO_EPSILONS};
use crate::env::{TaskDistribution, N_ACTIONS};
use crate::error::{MlreError, Result};
use crate::losses::{branch_pattern, loss_grad, loss_value, EncodedTrajectories, LossConfig, LossKind};
use crate::policy_opt::{self, PolicyNet, PpoConfig, Sample};
use crate::reward_model::{meta_grad, Graph, MetaGradMode, RewardNet};
use crate::seed::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub draws: usize,
    pub coords: usize,
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor of the relative error, so coordinates with a
    /// vanishing gradient are judged by absolute error instead.
    pub abs_floor: f64,
    pub meta_rel_tol: f64,
    pub layer_sizes: Vec<usize>,
    pub batch_pairs: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            draws: 10,
            coords: 64,
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            meta_rel_tol: 1e-6,
            layer_sizes: vec![8, 64, 64, 1],
            batch_pairs: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// Draw and parameter index of the worst coordinate.
    pub worst: (usize, usize),
    pub tol: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub lines: Vec<CheckLine>,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&format!(
                "{} {}: {} coordinates ({} skipped at kinks), max rel err {:.3e} at draw {} coord {}, tol {:.0e}\n",
                if l.pass { "PASS" } else { "FAIL" },
                l.name,
                l.checked,
                l.skipped,
                l.max_rel_err,
                l.worst.0,
                l.worst.1,
                l.tol
            ));
        }
        out
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// A central difference of a loss of size `L` carries rounding error near
/// `ε·|L|/h`, so gradients below `ε·|L|/(h·tol)` cannot be resolved to `tol`
/// and are compared on that absolute scale.
pub fn denominator_floor(cfg: &GradcheckConfig, loss: f64) -> f64 {
    cfg.abs_floor.max(f64::EPSILON * loss.abs() / (cfg.step * cfg.rel_tol))
}

struct Tally {
    checked: usize,
    skipped: usize,
    max_rel_err: f64,
    worst: (usize, usize),
}

impl Tally {
    fn new() -> Self {
        Tally {
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst: (0, 0),
        }
    }

    fn record(&mut self, draw: usize, coord: usize, err: f64) {
        self.checked += 1;
        if err > self.max_rel_err || err.is_nan() {
            self.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = (draw, coord);
        }
    }

    fn line(self, name: &str, tol: f64) -> CheckLine {
        CheckLine {
            name: name.to_string(),
            pass: self.max_rel_err <= tol,
            checked: self.checked,
            skipped: self.skipped,
            max_rel_err: self.max_rel_err,
            worst: self.worst,
            tol,
        }
    }
}

/// Rejects parameters that are not finite, naming the first bad coordinate.
pub fn check_finite_params(net: &RewardNet<f64>) -> Result<()> {
    match net.params().values().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(MlreError::NonFinite(format!(
            "reward parameter {i} is {}",
            net.params().values()[i]
        ))),
        None => Ok(()),
    }
}

/// A ranking batch drawn from a freshly sampled task.
pub fn random_batch(draw: u64, n_pairs: usize) -> Result<(EncodedTrajectories<f64>, Vec<RankedPair>)> {
    let task = TaskDistribution::default().sample_task(0x4743_0000 + draw);
    let trajs = collect_pool(&task, &DEFAULT_DEMO_EPSILONS, 30, draw)?;
    let ds = build_pairs(trajs, n_pairs, 1.0, draw)?;
    Ok((EncodedTrajectories::new(&ds.trajectories)?, ds.support_pairs))
}

fn check_reward_loss(
    net: &RewardNet<f64>,
    enc: &EncodedTrajectories<f64>,
    pairs: &[RankedPair],
    loss: &LossConfig,
    cfg: &GradcheckConfig,
    draw: usize,
    tally: &mut Tally,
    rng: &mut Rng,
) -> Result<()> {
    let g = loss_grad(net, enc, pairs, loss)?;
    let analytic = g.grad;
    let floor = denominator_floor(cfg, g.loss);
    let n = net.n_params();
    let base = branch_pattern(net, enc, pairs, loss);
    let mut done = 0;
    let mut attempts = 0;
    while done < cfg.coords.min(n) && attempts < 20 * cfg.coords {
        attempts += 1;
        let i = rng.gen_range(0..n);
        let mut plus = net.clone();
        plus.params_mut().values_mut()[i] += cfg.step;
        let mut minus = net.clone();
        minus.params_mut().values_mut()[i] -= cfg.step;
        if branch_pattern(&plus, enc, pairs, loss) != base || branch_pattern(&minus, enc, pairs, loss) != base {
            tally.skipped += 1;
            continue;
        }
        let numeric = (loss_value(&plus, enc, pairs, loss)? - loss_value(&minus, enc, pairs, loss)?) / (2.0 * cfg.step);
        tally.record(draw, i, rel_err(analytic[i], numeric, floor));
        done += 1;
    }
    Ok(())
}

/// Ranking and regularized losses over `draws` random networks and batches.
pub fn check_losses(cfg: &GradcheckConfig, fixed: Option<&RewardNet<f64>>) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    for kind in [LossKind::Trex, LossKind::Mlre] {
        let loss = LossConfig {
            kind,
            ..LossConfig::default()
        };
        let mut tally = Tally::new();
        for draw in 0..cfg.draws {
            let net = match fixed {
                Some(net) => net.clone(),
                None => RewardNet::init(&cfg.layer_sizes, seed::derive(cfg.seed, draw as u64))?,
            };
            check_finite_params(&net)?;
            let (enc, pairs) = random_batch(seed::derive(cfg.seed, 100 + draw as u64), cfg.batch_pairs)?;
            let mut rng = seed::rng(cfg.seed, 200 + draw as u64);
            check_reward_loss(&net, &enc, &pairs, &loss, cfg, draw, &mut tally, &mut rng)?;
        }
        let name = match kind {
            LossKind::Trex => "trex_loss",
            LossKind::Mlre => "mlre_loss",
        };
        lines.push(tally.line(name, cfg.rel_tol));
    }
    Ok(lines)
}

fn random_policy_batch(n_states: usize, len: usize, rng: &mut Rng) -> (PolicyNet, Vec<Sample>) {
    let mut net = PolicyNet::new(n_states);
    for row in &mut net.logits {
        row.iter_mut().for_each(|z| *z = rng.gen_range(-2.0..2.0));
    }
    net.values.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    let batch = (0..len)
        .map(|_| {
            let state = rng.gen_range(0..n_states);
            let action = rng.gen_range(0..N_ACTIONS);
            let logp = net.probs(state)[action].ln();
            Sample {
                state,
                action,
                old_log_prob: logp + rng.gen_range(-0.4..0.4),
                advantage: rng.gen_range(-2.0..2.0),
                value_target: rng.gen_range(-3.0..3.0),
            }
        })
        .collect();
    (net, batch)
}

/// The clipped surrogate with value and entropy terms.
pub fn check_policy_surrogate(cfg: &GradcheckConfig) -> CheckLine {
    let ppo = PpoConfig::default();
    let mut tally = Tally::new();
    for draw in 0..cfg.draws {
        let mut rng = seed::rng(cfg.seed, 300 + draw as u64);
        let (net, batch) = random_policy_batch(12, 32, &mut rng);
        let (value, analytic) = policy_opt::ppo_loss(&net, &batch, &ppo);
        let floor = denominator_floor(cfg, value);
        let base = policy_opt::branch_pattern(&net, &batch, ppo.clip_ratio);
        let touched: Vec<usize> = {
            let mut s: Vec<usize> = batch.iter().map(|x| x.state).collect();
            s.sort_unstable();
            s.dedup();
            s
        };
        let n_s = net.n_states();
        let coords: Vec<usize> = touched
            .iter()
            .flat_map(|&s| (s * N_ACTIONS..(s + 1) * N_ACTIONS).chain(std::iter::once(n_s * N_ACTIONS + s)))
            .collect();
        let mut done = 0;
        let mut attempts = 0;
        while done < cfg.coords && attempts < 20 * cfg.coords {
            attempts += 1;
            let i = coords[rng.gen_range(0..coords.len())];
            let flat = net.flat();
            let mut plus = net.clone();
            let mut minus = net.clone();
            let (mut fp, mut fm) = (flat.clone(), flat);
            fp[i] += cfg.step;
            fm[i] -= cfg.step;
            plus.set_flat(&fp);
            minus.set_flat(&fm);
            if policy_opt::branch_pattern(&plus, &batch, ppo.clip_ratio) != base
                || policy_opt::branch_pattern(&minus, &batch, ppo.clip_ratio) != base
            {
                tally.skipped += 1;
                continue;
            }
            let numeric = (policy_opt::ppo_loss(&plus, &batch, &ppo).0 - policy_opt::ppo_loss(&minus, &batch, &ppo).0)
                / (2.0 * cfg.step);
            tally.record(draw, i, rel_err(analytic[i], numeric, floor));
            done += 1;
        }
    }
    tally.line("policy_surrogate", cfg.rel_tol)
}

fn quad_support<'t>(g: &Graph<'t, f64>, a: &[[f64; 3]; 3]) -> Var<'t, f64> {
    let mut terms = Vec::with_capacity(9);
    for (i, row) in a.iter().enumerate() {
        for (j, &aij) in row.iter().enumerate() {
            terms.push((g.param(i) * g.param(j), 0.5 * aij));
        }
    }
    g.tape().linear_comb(&terms)
}

fn quad_query<'t>(g: &Graph<'t, f64>, b: &[f64]) -> Var<'t, f64> {
    let terms: Vec<_> = b
        .iter()
        .enumerate()
        .map(|(i, &bi)| {
            let d = g.param(i) - bi;
            (d * d, 0.5)
        })
        .collect();
    g.tape().linear_comb(&terms)
}

/// Closed-form meta-gradients of quadratic tasks on a three-parameter model:
/// support `½θᵀAθ`, query `½‖θ − b‖²`.
pub fn check_meta_quadratic(cfg: &GradcheckConfig) -> Result<Vec<CheckLine>> {
    let mut exact_tally = Tally::new();
    let mut fo_tally = Tally::new();
    for draw in 0..cfg.draws {
        let mut rng = seed::rng(cfg.seed, 400 + draw as u64);
        let theta: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // A = MᵀM + I is symmetric positive definite.
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = (0..3).map(|k| m[k * 3 + i] * m[k * 3 + j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
            }
        }
        let alpha = rng.gen_range(0.01..0.3);
        let net = RewardNet::linear(&theta[..2], theta[2])?;
        let a_theta: Vec<f64> = (0..3).map(|i| (0..3).map(|j| a[i][j] * theta[j]).sum()).collect();
        let resid: Vec<f64> = (0..3).map(|i| theta[i] - alpha * a_theta[i] - b[i]).collect();
        let a_resid: Vec<f64> = (0..3).map(|i| (0..3).map(|j| a[i][j] * resid[j]).sum()).collect();
        let closed_exact: Vec<f64> = (0..3).map(|i| resid[i] - alpha * a_resid[i]).collect();

        let exact = meta_grad(
            &net,
            |g| quad_support(g, &a),
            |g| quad_query(g, &b),
            alpha,
            MetaGradMode::Exact,
        )?
        .grad;
        let fo = meta_grad(
            &net,
            |g| quad_support(g, &a),
            |g| quad_query(g, &b),
            alpha,
            MetaGradMode::FirstOrder,
        )?
        .grad;
        for i in 0..3 {
            exact_tally.record(draw, i, rel_err(exact[i], closed_exact[i], 1e-12));
            fo_tally.record(draw, i, rel_err(fo[i], resid[i], 1e-12));
        }
    }
    Ok(vec![
        exact_tally.line("meta_grad_exact_quadratic", cfg.meta_rel_tol),
        fo_tally.line("meta_grad_first_order_quadratic", cfg.meta_rel_tol),
    ])
}

/// The full suite. With `fixed`, every reward-loss draw uses that network.
pub fn run(cfg: &GradcheckConfig, fixed: Option<&RewardNet<f64>>) -> Result<GradcheckReport> {
    if cfg.draws == 0 || cfg.coords == 0 || !(cfg.step > 0.0) {
        return Err(MlreError::config(
            "gradcheck",
            "draws, coords and step must be positive",
        ));
    }
    let mut lines = check_losses(cfg, fixed)?;
    lines.push(check_policy_surrogate(cfg));
    lines.extend(check_meta_quadratic(cfg)?);
    Ok(GradcheckReport { lines })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(rel_err(2.0, 1.0, 1e-6), 0.5);
        assert_eq!(rel_err(0.0, 1e-9, 1e-6), 1e-3);
    }

    #[test]
    fn nan_parameter_is_reported_by_index() {
        let mut net = RewardNet::<f64>::init(&[3, 4, 1], 0).unwrap();
        net.params_mut().values_mut()[7] = f64::NAN;
        let err = check_finite_params(&net).unwrap_err().to_string();
        assert!(err.contains("parameter 7"), "{err}");
    }
}
