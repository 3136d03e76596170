//! MAML over reward networks: per-task adaptation on support pairs, a meta
//! update from the adapted query losses, and fine-tuning on a new task.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demos::{PairDataset, RankedPair, SupportSet};
use crate::error::{MlreError, Result};
use crate::losses::{batch_iter, loss_grad, loss_value, EncodedTrajectories, LossConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::reward_model::{hvp, MetaGradMode, ParamVector, RewardNet};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub meta_iterations: usize,
    /// `None` visits every training task each iteration.
    pub tasks_per_batch: Option<usize>,
    pub inner_steps: usize,
    pub fine_tune_epochs: usize,
    pub inner_optimizer: OptimizerKind,
    pub outer_optimizer: OptimizerKind,
    pub meta_grad_mode: MetaGradMode,
    /// Elementwise bound on the summed meta-gradient; `None` leaves it raw.
    pub outer_grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.0005,
            beta: 0.0001,
            meta_iterations: 100,
            tasks_per_batch: None,
            inner_steps: 1,
            fine_tune_epochs: 100,
            inner_optimizer: OptimizerKind::Adam,
            outer_optimizer: OptimizerKind::Sgd,
            meta_grad_mode: MetaGradMode::FirstOrder,
            outer_grad_clip: None,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(MlreError::config("meta.alpha", "must be a non-negative finite number"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(MlreError::config("meta.beta", "must be a non-negative finite number"));
        }
        if self.inner_steps == 0 {
            return Err(MlreError::config("meta.inner_steps", "must be at least 1"));
        }
        if self.tasks_per_batch == Some(0) {
            return Err(MlreError::config("meta.tasks_per_batch", "must be at least 1"));
        }
        if self.outer_grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(MlreError::config(
                "meta.outer_grad_clip",
                "must be a positive finite number",
            ));
        }
        if self.outer_optimizer != OptimizerKind::Sgd {
            return Err(MlreError::config("meta.outer_optimizer", "only sgd is supported"));
        }
        Ok(())
    }

    /// Exact meta-gradients differentiate through plain gradient steps only.
    pub fn effective_inner_optimizer(&self) -> OptimizerKind {
        match self.meta_grad_mode {
            MetaGradMode::Exact => OptimizerKind::Sgd,
            MetaGradMode::FirstOrder => self.inner_optimizer,
        }
    }
}

/// One task's encoded trajectories with its support and query pairs.
#[derive(Clone, Debug)]
pub struct TaskData<F> {
    pub task_id: String,
    pub encoded: EncodedTrajectories<F>,
    pub support: Vec<RankedPair>,
    pub query: Vec<RankedPair>,
}

impl<F: Scalar> TaskData<F> {
    pub fn from_dataset(ds: &PairDataset) -> Result<Self> {
        Ok(TaskData {
            task_id: ds.task_id.clone(),
            encoded: EncodedTrajectories::new(&ds.trajectories)?,
            support: ds.support_pairs.clone(),
            query: ds.query_pairs.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    /// Mean support loss at θ over the batch tasks, before adaptation.
    pub meta_train_loss: f64,
    /// Mean query loss at the adapted parameters.
    pub query_loss: f64,
}

#[derive(Clone, Debug)]
pub struct MetaRunState<F> {
    pub theta: RewardNet<F>,
    pub per_task_psi: BTreeMap<String, ParamVector<F>>,
    pub iteration: usize,
    pub history: Vec<HistoryRow>,
}

impl<F: Scalar> MetaRunState<F> {
    pub fn new(theta: RewardNet<F>) -> Self {
        MetaRunState {
            theta,
            per_task_psi: BTreeMap::new(),
            iteration: 0,
            history: Vec::new(),
        }
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from("iteration,meta_train_loss,query_loss\n");
        for h in &self.history {
            out.push_str(&format!(
                "{},{:.17e},{:.17e}\n",
                h.iteration, h.meta_train_loss, h.query_loss
            ));
        }
        out
    }

    pub fn parse_history_csv(text: &str) -> Result<Vec<HistoryRow>> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        reader
            .deserialize()
            .map(|r| r.map_err(|e| MlreError::parse("loss history", e.to_string())))
            .collect()
    }
}

fn inner_path<F: Scalar>(
    theta: &RewardNet<F>,
    task: &TaskData<F>,
    cfg: &MetaConfig,
    loss: &LossConfig,
) -> Result<Vec<RewardNet<F>>> {
    if task.support.is_empty() {
        return Err(MlreError::Contract(format!(
            "task {} has no support pairs",
            task.task_id
        )));
    }
    let alpha = F::lit(cfg.alpha);
    let mut opt = Optimizer::new(cfg.effective_inner_optimizer(), theta.n_params());
    let mut path = vec![theta.clone()];
    for step in 0..cfg.inner_steps {
        let current = path.last().expect("path starts at theta");
        let g = loss_grad(current, &task.encoded, &task.support, loss).map_err(|e| match e {
            MlreError::NonFinite(m) => {
                MlreError::NonFinite(format!("task {} support batch (inner step {step}): {m}", task.task_id))
            }
            other => other,
        })?;
        let mut params = current.params().clone();
        opt.step(params.values_mut(), &g.grad, alpha);
        path.push(current.with_params(params)?);
    }
    Ok(path)
}

/// `θ′` after `inner_steps` updates on the task's support pairs. `theta` is
/// not modified; optimizer state is local to the call.
pub fn adapt<F: Scalar>(
    theta: &RewardNet<F>,
    task: &TaskData<F>,
    cfg: &MetaConfig,
    loss: &LossConfig,
) -> Result<RewardNet<F>> {
    Ok(inner_path(theta, task, cfg, loss)?.pop().expect("non-empty path"))
}

struct TaskMeta<F> {
    task_id: String,
    psi: ParamVector<F>,
    grad: Vec<F>,
    support_loss: F,
    query_loss: F,
}

fn task_meta_grad<F: Scalar>(
    theta: &RewardNet<F>,
    task: &TaskData<F>,
    cfg: &MetaConfig,
    loss: &LossConfig,
) -> Result<TaskMeta<F>> {
    if task.query.is_empty() {
        return Err(MlreError::Contract(format!("task {} has no query pairs", task.task_id)));
    }
    let support_loss = loss_value(theta, &task.encoded, &task.support, loss)?;
    let path = inner_path(theta, task, cfg, loss)?;
    let adapted = path.last().expect("non-empty path");
    let outer = loss_grad(adapted, &task.encoded, &task.query, loss)
        .map_err(|e| MlreError::NonFinite(format!("task {} query batch: {e}", task.task_id)))?;
    let mut g = outer.grad;
    if cfg.meta_grad_mode == MetaGradMode::Exact {
        let alpha = F::lit(cfg.alpha);
        for net in path[..path.len() - 1].iter().rev() {
            let hv = hvp(
                net,
                |graph| crate::losses::loss_var(graph, &task.encoded, &task.support, loss),
                &g,
            )?;
            g.iter_mut().zip(&hv).for_each(|(gi, &h)| *gi -= alpha * h);
        }
    }
    Ok(TaskMeta {
        task_id: task.task_id.clone(),
        psi: adapted.params().clone(),
        grad: g,
        support_loss,
        query_loss: outer.loss,
    })
}

/// Indices of the tasks visited at `iteration`, in ascending task-id order.
fn task_batch<F>(tasks: &[TaskData<F>], cfg: &MetaConfig, iteration: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by(|&a, &b| tasks[a].task_id.cmp(&tasks[b].task_id));
    match cfg.tasks_per_batch {
        Some(k) if k < tasks.len() => {
            let mut rng = seed::rng(cfg.seed, 0x4d45_5441_0000 + iteration as u64);
            let mut picked: Vec<usize> = sample(&mut rng, tasks.len(), k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| order[i]).collect()
        }
        _ => order,
    }
}

/// One meta-update `θ ← θ − β Σᵢ ∇_θ L_query(θ′ᵢ)`, summed in ascending
/// task-id order regardless of input order or scheduling.
pub fn meta_step<F: Scalar>(
    state: &MetaRunState<F>,
    tasks: &[TaskData<F>],
    cfg: &MetaConfig,
    loss: &LossConfig,
) -> Result<MetaRunState<F>> {
    if tasks.is_empty() {
        return Err(MlreError::Contract("meta step without training tasks".into()));
    }
    let batch = task_batch(tasks, cfg, state.iteration);
    let results: Vec<TaskMeta<F>> = batch
        .par_iter()
        .map(|&i| task_meta_grad(&state.theta, &tasks[i], cfg, loss))
        .collect::<Result<_>>()?;

    let mut total = vec![F::zero(); state.theta.n_params()];
    let (mut sl, mut ql) = (0.0, 0.0);
    let mut next = state.clone();
    for r in results {
        total.iter_mut().zip(&r.grad).for_each(|(t, &g)| *t += g);
        sl += r.support_loss.as_f64();
        ql += r.query_loss.as_f64();
        next.per_task_psi.insert(r.task_id, r.psi);
    }
    if let Some(c) = cfg.outer_grad_clip {
        let c = F::lit(c);
        total.iter_mut().for_each(|g| *g = g.max(-c).min(c));
    }
    next.theta.params_mut().axpy(-F::lit(cfg.beta), &total);
    if !next.theta.params().is_finite() {
        return Err(MlreError::NonFinite(format!(
            "meta parameters after iteration {}",
            state.iteration + 1
        )));
    }
    next.iteration += 1;
    let n = batch.len() as f64;
    next.history.push(HistoryRow {
        iteration: next.iteration,
        meta_train_loss: sl / n,
        query_loss: ql / n,
    });
    Ok(next)
}

/// Continues `state` until `cfg.meta_iterations` iterations have completed.
pub fn meta_train_from<F: Scalar>(
    mut state: MetaRunState<F>,
    tasks: &[TaskData<F>],
    cfg: &MetaConfig,
    loss: &LossConfig,
) -> Result<MetaRunState<F>> {
    cfg.validate()?;
    loss.validate()?;
    while state.iteration < cfg.meta_iterations {
        state = meta_step(&state, tasks, cfg, loss)?;
    }
    Ok(state)
}

pub fn meta_train<F: Scalar>(
    datasets: &[PairDataset],
    init: RewardNet<F>,
    cfg: &MetaConfig,
    loss: &LossConfig,
) -> Result<MetaRunState<F>> {
    if datasets.is_empty() {
        return Err(MlreError::Contract("meta training needs at least one dataset".into()));
    }
    let tasks: Vec<TaskData<F>> = datasets.iter().map(TaskData::from_dataset).collect::<Result<_>>()?;
    meta_train_from(MetaRunState::new(init), &tasks, cfg, loss)
}

/// Mini-batch descent on the support pairs only, with the inner optimizer and
/// rate `alpha`, for `fine_tune_epochs` epochs.
pub fn fine_tune<F: Scalar>(
    theta: &RewardNet<F>,
    support: SupportSet<'_>,
    cfg: &MetaConfig,
    loss: &LossConfig,
) -> Result<RewardNet<F>> {
    fine_tune_with(theta, support, cfg, loss, |_| Ok(()))
}

/// [`fine_tune`] with a hook applied after every optimizer step, e.g. a
/// projection onto a constraint set.
pub fn fine_tune_with<F, P>(
    theta: &RewardNet<F>,
    support: SupportSet<'_>,
    cfg: &MetaConfig,
    loss: &LossConfig,
    mut after_step: P,
) -> Result<RewardNet<F>>
where
    F: Scalar,
    P: FnMut(&mut RewardNet<F>) -> Result<()>,
{
    cfg.validate()?;
    loss.validate()?;
    if support.pairs.is_empty() {
        return Err(MlreError::Contract(format!(
            "task {} has no support pairs",
            support.task_id
        )));
    }
    let encoded = EncodedTrajectories::new(support.trajectories)?;
    let mut net = theta.clone();
    let mut opt = Optimizer::new(cfg.inner_optimizer, net.n_params());
    let alpha = F::lit(cfg.alpha);
    for epoch in 0..cfg.fine_tune_epochs {
        let batches = batch_iter(support.pairs, loss.batch_size, seed::derive(cfg.seed, epoch as u64))?;
        for (b, batch) in batches.iter().enumerate() {
            let g = loss_grad(&net, &encoded, batch, loss).map_err(|e| match e {
                MlreError::NonFinite(m) => MlreError::NonFinite(format!("fine-tune epoch {epoch} batch {b}: {m}")),
                other => other,
            })?;
            opt.step(net.params_mut().values_mut(), &g.grad, alpha);
            after_step(&mut net)?;
        }
    }
    Ok(net)
}

/// Loss over a task's support pairs; convenient for before/after summaries.
pub fn support_loss<F: Scalar>(net: &RewardNet<F>, support: SupportSet<'_>, loss: &LossConfig) -> Result<F> {
    let encoded = EncodedTrajectories::new(support.trajectories)?;
    loss_value(net, &encoded, support.pairs, loss)
}
