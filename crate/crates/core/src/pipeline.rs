//! File-mediated experiment stages: each command reads its predecessors'
//! artifacts from the output directory and writes its own.
//!
//! ```text
//! out/
//!   tasks/<task>.json        datasets/<task>.jsonl     gen_manifest.json
//!   meta/theta.w             meta/history.csv          meta/manifest.json
//!   finetune/<label>.w       finetune/<label>_summary.json
//!   policy/<label>/policy_<task>_seed<k>.w   policy/<label>/curve_<task>_seed<k>.csv
//!   eval/...                 gradcheck/report.txt
//! ```
//!
//! Apart from the `created_unix` field of manifests, every artifact is a pure
//! function of the configuration.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::demos::{build_pairs, collect_pool, PairDataset};
use crate::env::{TaskDistribution, TaskSpec};
use crate::error::{MlreError, Result};
use crate::eval::{self, ExtrapolationReport};
use crate::gradcheck::{self, GradcheckReport};
use crate::io::{self, DirLock};
use crate::meta::{self, MetaConfig, MetaRunState, TaskData};
use crate::policy_opt::{self, PolicyNet, PpoConfig};
use crate::reward_model::RewardNet;
use crate::seed;

const STREAM_DEMOS: u64 = 1;
const STREAM_PAIRS: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_META: u64 = 4;
const STREAM_FINETUNE: u64 = 5;
const STREAM_PPO: u64 = 6;
const STREAM_PROBES: u64 = 7;
const STREAM_EVAL: u64 = 8;
const STREAM_GRADCHECK: u64 = 9;

/// Paths of every artifact under an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn task(&self, task_id: &str) -> PathBuf {
        self.root.join("tasks").join(format!("{task_id}.json"))
    }

    pub fn dataset(&self, task_id: &str) -> PathBuf {
        self.root.join("datasets").join(format!("{task_id}.jsonl"))
    }

    pub fn gen_manifest(&self) -> PathBuf {
        self.root.join("gen_manifest.json")
    }

    pub fn theta(&self) -> PathBuf {
        self.root.join("meta").join("theta.w")
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("meta").join("history.csv")
    }

    pub fn meta_manifest(&self) -> PathBuf {
        self.root.join("meta").join("manifest.json")
    }

    pub fn reward(&self, label: &str) -> PathBuf {
        self.root.join("finetune").join(format!("{label}.w"))
    }

    pub fn finetune_summary(&self, label: &str) -> PathBuf {
        self.root.join("finetune").join(format!("{label}_summary.json"))
    }

    pub fn policy(&self, label: &str, task_id: &str, seed: usize) -> PathBuf {
        self.root
            .join("policy")
            .join(label)
            .join(format!("policy_{task_id}_seed{seed}.w"))
    }

    pub fn curve(&self, label: &str, task_id: &str, seed: usize) -> PathBuf {
        self.root
            .join("policy")
            .join(label)
            .join(format!("curve_{task_id}_seed{seed}.csv"))
    }

    pub fn policy_summary(&self, label: &str) -> PathBuf {
        self.root.join("policy").join(label).join("summary.json")
    }

    pub fn eval_file(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }

    pub fn gradcheck_report(&self) -> PathBuf {
        self.root.join("gradcheck").join("report.txt")
    }
}

pub fn task_id_for(task_seed: u64) -> String {
    format!("task-{task_seed}")
}

/// The configured task distribution, keyed by the global seed.
pub fn task_distribution(cfg: &RunConfig) -> TaskDistribution {
    TaskDistribution {
        seed: cfg.seed,
        ..cfg.task_distribution.clone()
    }
}

/// Meta-learning settings with the seed derived from the global one.
pub fn meta_config(cfg: &RunConfig, stream: u64) -> MetaConfig {
    MetaConfig {
        seed: seed::derive(cfg.seed, stream),
        ..cfg.meta.clone()
    }
}

pub fn ppo_config(cfg: &RunConfig, run: usize) -> PpoConfig {
    PpoConfig {
        seed: seed::derive(seed::derive(cfg.seed, STREAM_PPO), run as u64),
        ..cfg.ppo.clone()
    }
}

/// Random reward initialization shared by meta-training and the scratch baseline.
pub fn initial_reward(cfg: &RunConfig) -> Result<RewardNet<f64>> {
    RewardNet::init(&cfg.layer_sizes, seed::derive(cfg.seed, STREAM_INIT))
}

/// Samples a task, its demonstrations and its ranked pairs.
pub fn generate_task(cfg: &RunConfig, task_seed: u64, n_pairs: usize) -> Result<(TaskSpec, PairDataset)> {
    let task = task_distribution(cfg).sample_task(task_seed);
    let demos = collect_pool(
        &task,
        &cfg.demo_epsilons,
        cfg.demos_per_task,
        seed::derive(seed::derive(cfg.seed, STREAM_DEMOS), task_seed),
    )?;
    let pairs = build_pairs(
        demos,
        n_pairs,
        cfg.support_fraction,
        seed::derive(seed::derive(cfg.seed, STREAM_PAIRS), task_seed),
    )?;
    Ok((task, pairs))
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("summary serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    created_unix: u64,
    seed: u64,
    config: String,
    #[serde(flatten)]
    details: T,
}

fn write_manifest<T: Serialize>(path: &Path, command: &str, cfg: &RunConfig, details: T) -> Result<()> {
    let m = Manifest {
        command,
        created_unix: now_unix(),
        seed: cfg.seed,
        config: cfg.to_toml(),
        details,
    };
    io::write_atomic(path, to_json(&m).as_bytes())
}

#[derive(Clone, Debug, Serialize)]
pub struct GenSummary {
    pub train: Vec<String>,
    pub target: String,
    pub files: Vec<PathBuf>,
}

/// Generates every task and dataset in memory, then writes them; a failure
/// leaves no files behind.
pub fn cmd_gen(cfg: &RunConfig) -> Result<GenSummary> {
    cfg.validate()?;
    let mut jobs: Vec<(u64, usize)> = cfg.train_seeds.iter().map(|&s| (s, cfg.pairs_per_train_task)).collect();
    jobs.push((cfg.target_seed, cfg.pairs_target));
    let generated: Vec<(TaskSpec, PairDataset)> = jobs
        .par_iter()
        .map(|&(s, n)| generate_task(cfg, s, n))
        .collect::<Result<_>>()?;

    let layout = Layout::new(&cfg.out_dir);
    let _lock = DirLock::acquire(layout.root())?;
    let mut files = Vec::new();
    for (task, ds) in &generated {
        let tp = layout.task(task.task_id());
        io::write_atomic(&tp, task.to_json().as_bytes())?;
        let dp = layout.dataset(task.task_id());
        io::write_atomic(&dp, ds.to_jsonl().as_bytes())?;
        files.push(tp);
        files.push(dp);
    }
    let summary = GenSummary {
        train: cfg.train_seeds.iter().map(|&s| task_id_for(s)).collect(),
        target: task_id_for(cfg.target_seed),
        files,
    };
    write_manifest(&layout.gen_manifest(), "gen", cfg, &summary)?;
    Ok(summary)
}

pub fn load_task(layout: &Layout, task_seed: u64) -> Result<(TaskSpec, PairDataset)> {
    let id = task_id_for(task_seed);
    let task = TaskSpec::load(&layout.task(&id))?;
    let ds = PairDataset::load(&layout.dataset(&id))?;
    if ds.task_id != id {
        return Err(MlreError::parse(
            layout.dataset(&id).display().to_string(),
            format!("holds task {} instead of {id}", ds.task_id),
        ));
    }
    Ok((task, ds))
}

#[derive(Clone, Debug, Serialize)]
pub struct MetaSummary {
    pub iterations: usize,
    pub initial_query_loss: Option<f64>,
    pub final_query_loss: Option<f64>,
    pub theta: PathBuf,
    pub history: PathBuf,
}

/// Meta-trains from the shared initialization, or with `resume` runs
/// `meta_iterations` further iterations from the saved checkpoint.
pub fn cmd_meta(cfg: &RunConfig, resume: bool) -> Result<MetaSummary> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let datasets: Vec<PairDataset> = cfg
        .train_seeds
        .iter()
        .map(|&s| load_task(&layout, s).map(|(_, ds)| ds))
        .collect::<Result<_>>()?;
    let tasks: Vec<TaskData<f64>> = datasets.iter().map(TaskData::from_dataset).collect::<Result<_>>()?;

    let mut state = if resume {
        let theta = RewardNet::load(&layout.theta())?;
        let history = MetaRunState::<f64>::parse_history_csv(&io::read_to_string(&layout.history())?)?;
        let mut st = MetaRunState::new(theta);
        st.iteration = history.len();
        st.history = history;
        st
    } else {
        MetaRunState::new(initial_reward(cfg)?)
    };
    if state.theta.layer_sizes() != cfg.layer_sizes {
        return Err(MlreError::config(
            "layer_sizes",
            "differs from the checkpoint being resumed",
        ));
    }
    let mut mcfg = meta_config(cfg, STREAM_META);
    mcfg.meta_iterations = state.iteration + cfg.meta.meta_iterations;

    let _lock = DirLock::acquire(layout.root())?;
    state = meta::meta_train_from(state, &tasks, &mcfg, &cfg.loss)?;
    state.theta.save(&layout.theta())?;
    io::write_atomic(&layout.history(), state.history_csv().as_bytes())?;
    let summary = MetaSummary {
        iterations: state.iteration,
        initial_query_loss: state.history.first().map(|h| h.query_loss),
        final_query_loss: state.history.last().map(|h| h.query_loss),
        theta: layout.theta(),
        history: layout.history(),
    };
    write_manifest(
        &layout.meta_manifest(),
        "meta",
        cfg,
        serde_json::json!({
            "iterations": state.iteration,
            "meta_grad_mode": mcfg.meta_grad_mode,
            "inner_optimizer": mcfg.effective_inner_optimizer(),
            "history": state.history_csv(),
        }),
    )?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneSummary {
    pub label: String,
    pub task_id: String,
    pub support_pairs: usize,
    pub epochs: usize,
    pub support_loss_before: f64,
    pub support_loss_after: f64,
    pub weights: PathBuf,
}

pub fn reward_label(scratch: bool) -> &'static str {
    if scratch {
        "scratch"
    } else {
        "meta"
    }
}

/// Fine-tunes on the target support set from the meta checkpoint, or from
/// the shared random initialization when `scratch` is set.
pub fn cmd_finetune(cfg: &RunConfig, scratch: bool) -> Result<FinetuneSummary> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let (_, target) = load_task(&layout, cfg.target_seed)?;
    let start = if scratch {
        initial_reward(cfg)?
    } else {
        RewardNet::load(&layout.theta())?
    };
    let mcfg = meta_config(cfg, STREAM_FINETUNE);
    let support = target.support();
    let before = meta::support_loss(&start, support, &cfg.loss)?;
    let tuned = meta::fine_tune(&start, support, &mcfg, &cfg.loss)?;
    let after = meta::support_loss(&tuned, support, &cfg.loss)?;

    let label = reward_label(scratch);
    let _lock = DirLock::acquire(layout.root())?;
    tuned.save(&layout.reward(label))?;
    let summary = FinetuneSummary {
        label: label.into(),
        task_id: target.task_id.clone(),
        support_pairs: support.pairs.len(),
        epochs: mcfg.fine_tune_epochs,
        support_loss_before: before,
        support_loss_after: after,
        weights: layout.reward(label),
    };
    io::write_atomic(&layout.finetune_summary(label), to_json(&summary).as_bytes())?;
    Ok(summary)
}

/// Which reward a policy is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardSource {
    Meta,
    Scratch,
    /// The task's true linear reward; an upper-bound reference run.
    GroundTruth,
}

impl RewardSource {
    pub fn label(self) -> &'static str {
        match self {
            RewardSource::Meta => "meta",
            RewardSource::Scratch => "scratch",
            RewardSource::GroundTruth => "oracle",
        }
    }

    pub fn load(self, layout: &Layout, task: &TaskSpec) -> Result<RewardNet<f64>> {
        match self {
            RewardSource::GroundTruth => RewardNet::linear(task.w_star(), 0.0),
            other => RewardNet::load(&layout.reward(other.label())),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PolicyRun {
    pub seed: usize,
    /// Exact true return in the training convention, rewards on arrival.
    pub exact_true_return: f64,
    /// Exact true return counting the start state, comparable to `demo_return`.
    pub visit_return: f64,
    pub demo_return: f64,
    pub bdil_achieved: bool,
    pub final_mean_learned_return: f64,
    pub policy: PathBuf,
    pub curve: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct PolicySummary {
    pub label: String,
    pub task_id: String,
    pub optimal_return: f64,
    pub optimal_visit_return: f64,
    pub runs: Vec<PolicyRun>,
}

/// Trains `seeds` policies on the chosen reward for the target task.
pub fn cmd_policy(cfg: &RunConfig, source: RewardSource, seeds: usize) -> Result<PolicySummary> {
    cfg.validate()?;
    if seeds == 0 {
        return Err(MlreError::config("seeds", "must be at least 1"));
    }
    let layout = Layout::new(&cfg.out_dir);
    let (task, target) = load_task(&layout, cfg.target_seed)?;
    let reward = source.load(&layout, &task)?;
    let trained: Vec<policy_opt::TrainedPolicy> = (0..seeds)
        .into_par_iter()
        .map(|k| policy_opt::train_policy(&task, &reward, &ppo_config(cfg, k)))
        .collect::<Result<_>>()?;
    let plan = crate::env::value_iteration(&task, 1e-12)?;
    let optimal_return = crate::env::exact_return(task.mdp(), &task.true_rewards(), &plan.policy())?;
    let optimal_visit_return = eval::bdil_check(&task, &plan.policy(), &target.trajectories)?.policy_return;

    let label = source.label();
    let _lock = DirLock::acquire(layout.root())?;
    let mut runs = Vec::with_capacity(seeds);
    for (k, tp) in trained.iter().enumerate() {
        let policy = tp.net.policy();
        let bdil = eval::bdil_check(&task, &policy, &target.trajectories)?;
        let pp = layout.policy(label, task.task_id(), k);
        let cp = layout.curve(label, task.task_id(), k);
        tp.net.save(&pp)?;
        io::write_atomic(&cp, policy_opt::curve_csv(&tp.curve).as_bytes())?;
        runs.push(PolicyRun {
            seed: k,
            exact_true_return: crate::env::exact_return(task.mdp(), &task.true_rewards(), &policy)?,
            visit_return: bdil.policy_return,
            demo_return: bdil.demo_return,
            bdil_achieved: bdil.achieved,
            final_mean_learned_return: tp.curve.last().map_or(f64::NAN, |c| c.mean_learned_return),
            policy: pp,
            curve: cp,
        });
    }
    let summary = PolicySummary {
        label: label.into(),
        task_id: task.task_id().into(),
        optimal_return,
        optimal_visit_return,
        runs,
    };
    io::write_atomic(&layout.policy_summary(label), to_json(&summary).as_bytes())?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Extrapolation scatter and correlations for one reward checkpoint.
    Reward,
    /// Reward report plus improvement-bound and beyond-demonstrator summaries for every saved policy.
    Full,
    /// Side-by-side correlations of the meta and scratch checkpoints.
    Compare,
}

#[derive(Clone, Debug, Serialize)]
pub struct RewardEval {
    pub label: String,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub n_probes: usize,
    pub n_beyond_demos: usize,
    pub demo_return_range: Option<(f64, f64)>,
}

impl RewardEval {
    fn new(label: &str, r: &ExtrapolationReport) -> Self {
        RewardEval {
            label: label.into(),
            pearson: r.pearson,
            spearman: r.spearman,
            n_probes: r.points.len(),
            n_beyond_demos: r.n_beyond_demos,
            demo_return_range: r.demo_return_range,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PolicyEval {
    pub seed: usize,
    pub theorem1: eval::Theorem1Report,
    pub bdil: eval::BdilResult,
    pub evaluation: policy_opt::PolicyEvaluation,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub task_id: String,
    pub rewards: Vec<RewardEval>,
    pub policies: Vec<PolicyEval>,
    pub files: Vec<PathBuf>,
}

/// Probe trajectories on the target task across the full ε range.
pub fn target_probes(cfg: &RunConfig, task: &TaskSpec) -> Result<Vec<crate::demos::Trajectory>> {
    eval::probe_trajectories(task, cfg.probes_per_epsilon, seed::derive(cfg.seed, STREAM_PROBES))
}

pub fn cmd_eval(cfg: &RunConfig, mode: EvalMode, scratch: bool) -> Result<EvalSummary> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let (task, target) = load_task(&layout, cfg.target_seed)?;
    let probes = target_probes(cfg, &task)?;
    let tag = format!("{}_seed{}", task.task_id(), cfg.seed);
    let labels: Vec<&str> = match mode {
        EvalMode::Compare => vec!["meta", "scratch"],
        _ => vec![reward_label(scratch)],
    };
    let mut nets = Vec::new();
    for &label in &labels {
        nets.push((label, RewardNet::<f64>::load(&layout.reward(label))?));
    }

    let mut outputs: Vec<(PathBuf, String)> = Vec::new();
    let mut rewards = Vec::new();
    for (label, net) in &nets {
        let report = eval::extrapolation_report(net, &probes, &target.trajectories)?;
        if mode != EvalMode::Compare {
            outputs.push((
                layout.eval_file(&format!("extrapolation_{label}_{tag}.csv")),
                report.points_csv(),
            ));
        }
        rewards.push(RewardEval::new(label, &report));
    }
    if mode == EvalMode::Compare {
        let mut table = String::from("label,pearson,spearman,n_probes,n_beyond_demos\n");
        for r in &rewards {
            table.push_str(&format!(
                "{},{},{},{},{}\n",
                r.label,
                eval::fmt_corr(r.pearson),
                eval::fmt_corr(r.spearman),
                r.n_probes,
                r.n_beyond_demos
            ));
        }
        outputs.push((layout.eval_file(&format!("compare_{tag}.csv")), table));
    }

    let mut policies = Vec::new();
    if mode == EvalMode::Full {
        let (label, net) = &nets[0];
        let mut k = 0;
        while layout.policy(label, task.task_id(), k).exists() {
            let policy = PolicyNet::load(&layout.policy(label, task.task_id(), k))?.policy();
            let mut rng = seed::rng(seed::derive(cfg.seed, STREAM_EVAL), k as u64);
            policies.push(PolicyEval {
                seed: k,
                theorem1: eval::theorem1_report(&task, net, &policy, &target.trajectories)?,
                bdil: eval::bdil_check(&task, &policy, &target.trajectories)?,
                evaluation: policy_opt::evaluate_policy(&task, &policy, net, cfg.eval_episodes, &mut rng)?,
            });
            k += 1;
        }
        if policies.is_empty() {
            return Err(MlreError::io(
                layout.policy(label, task.task_id(), 0),
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "no policy checkpoints; run the policy command first",
                ),
            ));
        }
    }

    let name = match mode {
        EvalMode::Reward => format!("reward_{}_{tag}.json", labels[0]),
        EvalMode::Full => format!("full_{}_{tag}.json", labels[0]),
        EvalMode::Compare => format!("compare_{tag}.json"),
    };
    let mut summary = EvalSummary {
        task_id: task.task_id().into(),
        rewards,
        policies,
        files: outputs.iter().map(|(p, _)| p.clone()).collect(),
    };
    summary.files.push(layout.eval_file(&name));
    outputs.push((layout.eval_file(&name), to_json(&summary)));

    let _lock = DirLock::acquire(layout.root())?;
    for (path, text) in &outputs {
        io::write_atomic(path, text.as_bytes())?;
    }
    Ok(summary)
}

/// Finite-difference and closed-form gradient checks. With `weights`, the
/// loss checks run at that fixed reward network.
pub fn cmd_gradcheck(cfg: &RunConfig, weights: Option<&Path>) -> Result<GradcheckReport> {
    cfg.validate()?;
    let fixed = weights.map(RewardNet::<f64>::load).transpose()?;
    let gcfg = gradcheck::GradcheckConfig {
        seed: seed::derive(cfg.seed, STREAM_GRADCHECK),
        ..cfg.gradcheck.clone()
    };
    let report = gradcheck::run(&gcfg, fixed.as_ref())?;
    let layout = Layout::new(&cfg.out_dir);
    let _lock = DirLock::acquire(layout.root())?;
    io::write_atomic(&layout.gradcheck_report(), report.to_text().as_bytes())?;
    Ok(report)
}
