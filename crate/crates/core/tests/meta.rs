mod common;

use mlre::demos::{PairDataset, RankedPair, Trajectory};
use mlre::losses::{loss_grad, loss_value, EncodedTrajectories, LossConfig, LossKind};
use mlre::meta::{adapt, fine_tune, meta_step, meta_train, support_loss, MetaConfig, MetaRunState, TaskData};
use mlre::optim::OptimizerKind;
use mlre::pipeline;
use mlre::reward_model::{MetaGradMode, RewardNet};
use nalgebra::{DMatrix, DVector};

fn small_task(seed: u64, id: &str) -> TaskData<f64> {
    let mut rng = common::rng(seed);
    let pool = common::row_pool(&mut rng, 10, 3);
    let trajs: Vec<Trajectory> = (0..10)
        .map(|_| common::synthetic_trajectory(&mut rng, 6, &pool))
        .collect();
    let ds = PairDataset {
        task_id: id.into(),
        seed,
        trajectories: trajs,
        support_pairs: common::random_pairs(&mut rng, 10, 12),
        query_pairs: common::random_pairs(&mut rng, 10, 6),
    };
    TaskData::from_dataset(&ds).unwrap()
}

fn sgd_cfg(alpha: f64, beta: f64) -> MetaConfig {
    MetaConfig {
        alpha,
        beta,
        inner_optimizer: OptimizerKind::Sgd,
        ..MetaConfig::default()
    }
}

#[test]
fn zero_step_adaptation_is_identity() {
    let task = small_task(1, "a");
    let theta = RewardNet::<f64>::init(&[3, 6, 1], 0).unwrap();
    let adapted = adapt(&theta, &task, &sgd_cfg(0.0, 1e-3), &LossConfig::default()).unwrap();
    assert_eq!(adapted.params().values(), theta.params().values());
}

#[test]
fn single_sgd_step_matches_manual_update() {
    let task = small_task(2, "a");
    let theta = RewardNet::<f64>::init(&[3, 6, 1], 1).unwrap();
    let before = theta.clone();
    let loss = LossConfig::default();
    let adapted = adapt(&theta, &task, &sgd_cfg(0.01, 1e-3), &loss).unwrap();
    let g = loss_grad(&theta, &task.encoded, &task.support, &loss).unwrap().grad;
    for ((a, t), gi) in adapted.params().values().iter().zip(theta.params().values()).zip(&g) {
        assert_eq!(*a, t - 0.01 * gi);
    }
    assert_eq!(theta.params().values(), before.params().values());
    let again = adapt(&theta, &task, &sgd_cfg(0.01, 1e-3), &loss).unwrap();
    assert_eq!(again.params().values(), adapted.params().values());
}

#[test]
fn first_order_meta_step_matches_two_call_recomputation() {
    let task = small_task(3, "a");
    let theta = RewardNet::<f64>::init(&[3, 6, 1], 2).unwrap();
    let loss = LossConfig::default();
    let cfg = sgd_cfg(0.01, 0.05);
    let next = meta_step(
        &MetaRunState::new(theta.clone()),
        std::slice::from_ref(&task),
        &cfg,
        &loss,
    )
    .unwrap();
    let g_s = loss_grad(&theta, &task.encoded, &task.support, &loss).unwrap().grad;
    let adapted = theta.with_params(theta.params().scaled_add(-0.01, &g_s)).unwrap();
    let g_q = loss_grad(&adapted, &task.encoded, &task.query, &loss).unwrap().grad;
    for ((n, t), g) in next
        .theta
        .params()
        .values()
        .iter()
        .zip(theta.params().values())
        .zip(&g_q)
    {
        assert!((n - (t - 0.05 * g)).abs() <= 1e-15 * (1.0 + t.abs()));
    }
    assert_eq!(next.iteration, 1);
    assert_eq!(next.history.len(), 1);
    assert_eq!(next.per_task_psi["a"].values(), adapted.params().values());
}

#[test]
fn zero_meta_rate_leaves_theta_unchanged() {
    let tasks = [small_task(4, "a"), small_task(5, "b")];
    let theta = RewardNet::<f64>::init(&[3, 6, 1], 3).unwrap();
    let next = meta_step(
        &MetaRunState::new(theta.clone()),
        &tasks,
        &sgd_cfg(0.01, 0.0),
        &LossConfig::default(),
    )
    .unwrap();
    assert_eq!(next.theta.params().values(), theta.params().values());
}

#[test]
fn task_order_does_not_change_the_update() {
    let tasks: Vec<_> = ["c", "a", "d", "b"]
        .iter()
        .enumerate()
        .map(|(i, id)| small_task(10 + i as u64, id))
        .collect();
    let mut reversed = tasks.clone();
    reversed.reverse();
    let theta = RewardNet::<f64>::init(&[3, 6, 1], 4).unwrap();
    let cfg = MetaConfig {
        beta: 0.01,
        ..MetaConfig::default()
    };
    let loss = LossConfig::default();
    let a = meta_step(&MetaRunState::new(theta.clone()), &tasks, &cfg, &loss).unwrap();
    let b = meta_step(&MetaRunState::new(theta), &reversed, &cfg, &loss).unwrap();
    assert_eq!(a.theta.params().values(), b.theta.params().values());
    assert_eq!(a.history, b.history);
}

/// Feature-count difference `Σφ(τ_low) − Σφ(τ_high)`, with a trailing bias count.
fn pair_direction(trajs: &[Trajectory], p: &RankedPair) -> DVector<f64> {
    let count = |t: &Trajectory| {
        let mut v = DVector::<f64>::zeros(4);
        for phi in t.arrived_features() {
            for (k, x) in phi.iter().enumerate() {
                v[k] += x;
            }
            v[3] += 1.0;
        }
        v
    };
    count(&trajs[p.low]) - count(&trajs[p.high])
}

/// Closed-form gradient and Hessian of the mean ranking loss for a linear head.
fn ranking_grad_hess(theta: &DVector<f64>, trajs: &[Trajectory], pairs: &[RankedPair]) -> (DVector<f64>, DMatrix<f64>) {
    let mut g = DVector::zeros(4);
    let mut h = DMatrix::zeros(4, 4);
    for p in pairs {
        let d = pair_direction(trajs, p);
        let s = 1.0 / (1.0 + (-theta.dot(&d)).exp());
        g += s * &d;
        h += s * (1.0 - s) * &d * d.transpose();
    }
    let n = pairs.len() as f64;
    (g / n, h / n)
}

#[test]
fn exact_meta_step_matches_closed_form_through_inner_step() {
    let loss = LossConfig {
        kind: LossKind::Trex,
        ..LossConfig::default()
    };
    for seed in 0..5 {
        let mut rng = common::rng(100 + seed);
        let pool = common::row_pool(&mut rng, 8, 3);
        let trajs: Vec<Trajectory> = (0..8)
            .map(|_| common::synthetic_trajectory(&mut rng, 5, &pool))
            .collect();
        let ds = PairDataset {
            task_id: "q".into(),
            seed,
            trajectories: trajs.clone(),
            support_pairs: common::random_pairs(&mut rng, 8, 10),
            query_pairs: common::random_pairs(&mut rng, 8, 5),
        };
        let task = TaskData::from_dataset(&ds).unwrap();
        let theta = RewardNet::<f64>::init(&[3, 1], seed).unwrap();
        let (alpha, beta) = (0.2, 0.1);
        let cfg = MetaConfig {
            alpha,
            beta,
            meta_grad_mode: MetaGradMode::Exact,
            ..MetaConfig::default()
        };
        let next = meta_step(
            &MetaRunState::new(theta.clone()),
            std::slice::from_ref(&task),
            &cfg,
            &loss,
        )
        .unwrap();

        let t = DVector::from_column_slice(theta.params().values());
        let (g_s, h_s) = ranking_grad_hess(&t, &trajs, &ds.support_pairs);
        let adapted = &t - alpha * g_s;
        let (g_q, _) = ranking_grad_hess(&adapted, &trajs, &ds.query_pairs);
        let meta_g = (DMatrix::identity(4, 4) - alpha * h_s) * g_q;
        let want = &t - beta * &meta_g;
        for i in 0..4 {
            let err = (next.theta.params().values()[i] - want[i]).abs();
            assert!(
                err <= 1e-6 * beta * meta_g.amax().max(1e-3),
                "seed {seed} coord {i}: err {err:e}"
            );
        }
    }
}

#[test]
fn zero_iterations_return_the_initialization_and_runs_repeat_bitwise() {
    let ds: Vec<PairDataset> = (0..2)
        .map(|i| {
            let mut rng = common::rng(20 + i);
            let pool = common::row_pool(&mut rng, 10, 3);
            let trajs: Vec<Trajectory> = (0..10)
                .map(|_| common::synthetic_trajectory(&mut rng, 6, &pool))
                .collect();
            PairDataset {
                task_id: format!("t{i}"),
                seed: i,
                trajectories: trajs,
                support_pairs: common::random_pairs(&mut rng, 10, 12),
                query_pairs: common::random_pairs(&mut rng, 10, 6),
            }
        })
        .collect();
    let init = RewardNet::<f64>::init(&[3, 6, 1], 5).unwrap();
    let loss = LossConfig::default();
    let none = meta_train(
        &ds,
        init.clone(),
        &MetaConfig {
            meta_iterations: 0,
            ..MetaConfig::default()
        },
        &loss,
    )
    .unwrap();
    assert_eq!(none.theta.params().values(), init.params().values());
    assert!(none.history.is_empty());
    let cfg = MetaConfig {
        meta_iterations: 5,
        beta: 1e-3,
        ..MetaConfig::default()
    };
    let a = meta_train(&ds, init.clone(), &cfg, &loss).unwrap();
    let b = meta_train(&ds, init, &cfg, &loss).unwrap();
    assert_eq!(a.theta.params().values(), b.theta.params().values());
    assert_eq!(a.history.len(), 5);
    assert_eq!(a.history, b.history);
}

#[test]
fn fine_tuning_with_no_epochs_is_identity_and_only_reads_support() {
    let exp = common::experiment(0, 50);
    let theta = pipeline::initial_reward(&exp.cfg).unwrap();
    let cfg = MetaConfig {
        fine_tune_epochs: 0,
        ..MetaConfig::default()
    };
    let same = fine_tune(&theta, exp.target.support(), &cfg, &LossConfig::default()).unwrap();
    assert_eq!(same.params().values(), theta.params().values());

    // Corrupting the query pairs cannot affect fine-tuning.
    let mut tampered = exp.target.clone();
    tampered
        .query_pairs
        .iter_mut()
        .for_each(|p| std::mem::swap(&mut p.low, &mut p.high));
    let cfg = MetaConfig {
        fine_tune_epochs: 3,
        ..MetaConfig::default()
    };
    let a = fine_tune(&theta, exp.target.support(), &cfg, &LossConfig::default()).unwrap();
    let b = fine_tune(&theta, tampered.support(), &cfg, &LossConfig::default()).unwrap();
    assert_eq!(a.params().values(), b.params().values());
}

#[test]
fn fine_tuning_lowers_support_loss_for_most_seeds() {
    let loss = LossConfig::default();
    let mut lowered = 0;
    for seed in 0..5 {
        let exp = common::experiment(seed, 50);
        let theta = pipeline::initial_reward(&exp.cfg).unwrap();
        let cfg = pipeline::meta_config(&exp.cfg, 5);
        let tuned = fine_tune(&theta, exp.target.support(), &cfg, &loss).unwrap();
        let before = support_loss(&theta, exp.target.support(), &loss).unwrap();
        let after = support_loss(&tuned, exp.target.support(), &loss).unwrap();
        lowered += usize::from(after <= before);
    }
    assert!(lowered >= 3, "support loss lowered in {lowered}/5 seeds");
}

#[test]
fn meta_training_lowers_query_loss_for_most_seeds() {
    let loss = LossConfig::default();
    let mut lowered = 0;
    for seed in 0..5 {
        let exp = common::experiment(seed, 50);
        let init = pipeline::initial_reward(&exp.cfg).unwrap();
        let st = meta_train(&exp.train, init, &pipeline::meta_config(&exp.cfg, 4), &loss).unwrap();
        let (first, last) = (st.history[0].query_loss, st.history.last().unwrap().query_loss);
        lowered += usize::from(last < first);
    }
    assert!(lowered >= 3, "query loss lowered in {lowered}/5 seeds");
}

#[test]
fn meta_initialization_reaches_lower_target_query_loss() {
    // Both regularizer terms saturate at λ once predicted returns are large,
    // so meta-initialized runs often sit at 2λ and single seeds are near ties.
    let loss = LossConfig::default();
    let mut wins = 0;
    for seed in 0..10 {
        let exp = common::experiment(seed, 50);
        let init = pipeline::initial_reward(&exp.cfg).unwrap();
        let st = meta_train(&exp.train, init.clone(), &pipeline::meta_config(&exp.cfg, 4), &loss).unwrap();
        let cfg = pipeline::meta_config(&exp.cfg, 5);
        let meta_ft = fine_tune(&st.theta, exp.target.support(), &cfg, &loss).unwrap();
        let scratch_ft = fine_tune(&init, exp.target.support(), &cfg, &loss).unwrap();
        let enc = EncodedTrajectories::new(&exp.target.trajectories).unwrap();
        let q = |n: &RewardNet<f64>| loss_value(n, &enc, &exp.target.query_pairs, &loss).unwrap();
        wins += usize::from(q(&meta_ft) < q(&scratch_ft));
    }
    assert!(wins >= 6, "meta initialization won in {wins}/10 seeds");
}
