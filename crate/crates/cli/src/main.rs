use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mlre::eval::fmt_corr;
use mlre::pipeline::{self, EvalMode, RewardSource};
use mlre::reward_model::MetaGradMode;
use mlre::{MlreError, RunConfig};

/// Reward learning from ranked demonstrations with a meta-learned initialization.
///
/// Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
/// failure (including failed gradient checks), 3 I/O error.
#[derive(Parser, Debug)]
#[command(name = "mlre", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Global seed, overriding the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample tasks, collect demonstrations and build ranked pairs.
    Gen,
    /// Meta-train the reward initialization on the training tasks.
    Meta {
        /// Run further iterations from the saved checkpoint.
        #[arg(long)]
        resume: bool,
        /// Differentiate through the inner step (forces SGD inner updates).
        #[arg(long)]
        exact_meta_grad: bool,
    },
    /// Fine-tune a reward network on the target task's support pairs.
    Finetune {
        /// Start from the random initialization instead of the meta checkpoint.
        #[arg(long)]
        scratch: bool,
    },
    /// Train policies on a learned (or the true) reward of the target task.
    Policy {
        /// Use the scratch-initialized reward.
        #[arg(long, conflicts_with = "ground_truth")]
        scratch: bool,
        /// Use the true reward, as an upper-bound reference.
        #[arg(long)]
        ground_truth: bool,
        /// Number of independently seeded runs.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Reward extrapolation, improvement-bound and beyond-demonstrator reports.
    Eval {
        #[arg(long, value_enum, default_value_t = Mode::Reward)]
        mode: Mode,
        /// Evaluate the scratch-initialized reward.
        #[arg(long)]
        scratch: bool,
    },
    /// Check analytic gradients against finite differences and closed forms.
    Gradcheck {
        /// Run the loss checks at this reward network instead of random draws.
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Reward,
    Full,
    Compare,
}

fn load_config(common: &Common) -> mlre::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> mlre::Result<ExitCode> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Gen => {
            let s = pipeline::cmd_gen(&cfg)?;
            println!("generated {} training tasks and target {}", s.train.len(), s.target);
            for f in &s.files {
                println!("  {}", f.display());
            }
        }
        Command::Meta {
            resume,
            exact_meta_grad,
        } => {
            if exact_meta_grad {
                cfg.meta.meta_grad_mode = MetaGradMode::Exact;
            }
            let s = pipeline::cmd_meta(&cfg, resume)?;
            println!(
                "meta-trained to iteration {}; query loss {} -> {}",
                s.iterations,
                s.initial_query_loss.map_or("-".into(), |v| format!("{v:.6e}")),
                s.final_query_loss.map_or("-".into(), |v| format!("{v:.6e}")),
            );
            println!("  {}\n  {}", s.theta.display(), s.history.display());
        }
        Command::Finetune { scratch } => {
            let s = pipeline::cmd_finetune(&cfg, scratch)?;
            println!(
                "fine-tuned {} reward on {} support pairs of {} for {} epochs; support loss {:.6e} -> {:.6e}",
                s.label, s.support_pairs, s.task_id, s.epochs, s.support_loss_before, s.support_loss_after
            );
            println!("  {}", s.weights.display());
        }
        Command::Policy {
            scratch,
            ground_truth,
            seeds,
        } => {
            let source = match (scratch, ground_truth) {
                (_, true) => RewardSource::GroundTruth,
                (true, false) => RewardSource::Scratch,
                (false, false) => RewardSource::Meta,
            };
            let s = pipeline::cmd_policy(&cfg, source, seeds)?;
            println!(
                "{} policies on {} (optimal return {:.4}, counting the start state {:.4})",
                s.label, s.task_id, s.optimal_return, s.optimal_visit_return
            );
            for r in &s.runs {
                println!(
                    "  seed {}: true return {:.4}; counting the start state {:.4} vs demonstrations {:.4} ({})  {}",
                    r.seed,
                    r.exact_true_return,
                    r.visit_return,
                    r.demo_return,
                    if r.bdil_achieved { "beyond" } else { "not beyond" },
                    r.curve.display()
                );
            }
        }
        Command::Eval { mode, scratch } => {
            let mode = match mode {
                Mode::Reward => EvalMode::Reward,
                Mode::Full => EvalMode::Full,
                Mode::Compare => EvalMode::Compare,
            };
            let s = pipeline::cmd_eval(&cfg, mode, scratch)?;
            for r in &s.rewards {
                println!(
                    "{} reward on {}: pearson {} spearman {} ({} probes, {} beyond demonstrations)",
                    r.label,
                    s.task_id,
                    fmt_corr(r.pearson),
                    fmt_corr(r.spearman),
                    r.n_probes,
                    r.n_beyond_demos
                );
            }
            for p in &s.policies {
                let t = &p.theorem1;
                println!(
                    "  policy seed {}: J_hat {:.4} J_demo {:.4} J_opt {:.4} premise {} beyond {}",
                    p.seed, t.j_hat, t.j_demo, t.j_opt, t.premise_holds, t.bd_achieved
                );
            }
            for f in &s.files {
                println!("  {}", f.display());
            }
        }
        Command::Gradcheck { weights } => {
            let report = pipeline::cmd_gradcheck(&cfg, weights.as_deref())?;
            print!("{}", report.to_text());
            if !report.pass() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &MlreError) -> u8 {
    e.exit_code() as u8
}
