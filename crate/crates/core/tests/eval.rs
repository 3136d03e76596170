use mlre::demos::{collect_one_life, make_demonstrator, Trajectory};
use mlre::env::{
    self, default_features, FeatureMap, LayoutTemplate, MdpSpec, TabularPolicy, TaskDistribution, TaskSpec,
    DEFAULT_PHI_MAX, N_ACTIONS,
};
use mlre::eval::{
    bdil_check, exact_visit_return, extrapolation_report, feature_expectation, probe_trajectories, theorem1_report,
    visit_return,
};
use mlre::reward_model::RewardNet;
use mlre::seed;
use rand::Rng;

fn task(seed: u64) -> TaskSpec {
    TaskDistribution::default().sample_task(seed)
}

fn random_policy(n: usize, rng: &mut impl Rng) -> TabularPolicy {
    let probs = (0..n)
        .map(|_| {
            let raw: [f64; N_ACTIONS] = std::array::from_fn(|_| rng.gen_range(0.01..1.0));
            let total: f64 = raw.iter().sum();
            raw.map(|p| p / total)
        })
        .collect();
    TabularPolicy::new(probs).unwrap()
}

#[test]
fn linear_value_identity_holds_for_random_policies_and_weights() {
    let mut rng = seed::rng(7, 0);
    for s in 0..5 {
        let task = task(s);
        for _ in 0..20 {
            let policy = random_policy(task.n_states(), &mut rng);
            let phi = feature_expectation(&task, &policy).unwrap();
            let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rewards: Vec<f64> = (0..task.n_states())
                .map(|s| w.iter().zip(task.features().phi(s)).map(|(a, b)| a * b).sum())
                .collect();
            let lhs: f64 = w.iter().zip(&phi).map(|(a, b)| a * b).sum();
            let rhs = exact_visit_return(task.mdp(), &rewards, &policy).unwrap();
            assert!((lhs - rhs).abs() <= 1e-8, "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn single_absorbing_cell_gives_geometric_series() {
    let mdp = MdpSpec::new(1, 1, 0.9, 10, vec![], 0.0, vec![1.0]).unwrap();
    let features = FeatureMap::new(vec![vec![0.5, -1.0]], DEFAULT_PHI_MAX).unwrap();
    let task = TaskSpec::new(mdp, features, vec![0.5, 0.5], "one").unwrap();
    let phi = feature_expectation(&task, &TabularPolicy::uniform(1)).unwrap();
    assert!((phi[0] - 5.0).abs() < 1e-12 && (phi[1] + 10.0).abs() < 1e-12, "{phi:?}");
}

#[test]
fn feature_expectation_matches_rollouts() {
    let task = task(1);
    let mdp = task.mdp();
    let policy = TabularPolicy::uniform(task.n_states());
    let exact = feature_expectation(&task, &policy).unwrap();
    let mut rng = seed::rng(3, 0);
    let n = 100_000;
    let steps = mdp.evaluation_horizon(DEFAULT_PHI_MAX);
    let mut sums = [0.0; 8];
    let mut squares = [0.0; 8];
    for _ in 0..n {
        let mut s = mdp.sample_initial(&mut rng);
        let mut acc = task.features().phi(s).to_vec();
        let mut discount = 1.0;
        for _ in 0..steps {
            if mdp.is_terminal(s) {
                break;
            }
            let a = policy.sample(s, &mut rng);
            s = mdp.sample_next(s, a, &mut rng).unwrap();
            discount *= mdp.gamma();
            for (x, f) in acc.iter_mut().zip(task.features().phi(s)) {
                *x += discount * f;
            }
        }
        for k in 0..8 {
            sums[k] += acc[k];
            squares[k] += acc[k] * acc[k];
        }
    }
    for k in 0..8 {
        let mean = sums[k] / n as f64;
        let se = ((squares[k] / n as f64 - mean * mean) / (n as f64 - 1.0)).sqrt();
        assert!(
            (mean - exact[k]).abs() <= 3.0 * se + 1e-12,
            "feature {k}: {mean} vs {} (se {se})",
            exact[k]
        );
    }
}

#[test]
fn ground_truth_reward_extrapolates_perfectly() {
    let task = task(2);
    let probes = probe_trajectories(&task, 10, 4).unwrap();
    let truth = RewardNet::linear(task.w_star(), 0.0).unwrap();
    let r = extrapolation_report(&truth, &probes, &probes[..20]).unwrap();
    assert!((r.pearson.unwrap() - 1.0).abs() <= 1e-9);
    assert!((r.spearman.unwrap() - 1.0).abs() <= 1e-9);
    assert!(r.n_beyond_demos > 0);

    let negated = RewardNet::linear(&task.w_star().iter().map(|w| -w).collect::<Vec<_>>(), 0.0).unwrap();
    let r = extrapolation_report(&negated, &probes, &probes[..20]).unwrap();
    assert!((r.spearman.unwrap() + 1.0).abs() <= 1e-9);

    let report_again = extrapolation_report(&negated, &probes, &probes[..20]).unwrap();
    assert_eq!(r, report_again);
}

#[test]
fn flat_prediction_reports_undefined_correlation() {
    let task = task(2);
    let probes = probe_trajectories(&task, 5, 4).unwrap();
    let flat = RewardNet::<f64>::zeros(&[8, 1]).unwrap();
    let r = extrapolation_report(&flat, &probes, &probes).unwrap();
    assert_eq!(r.pearson, None);
    assert_eq!(r.spearman, None);
    assert!(extrapolation_report(&flat, &probes[..1], &probes).is_err());
}

#[test]
fn exact_reward_and_optimal_policy_leave_no_error_terms() {
    let task = task(3);
    let opt = env::value_iteration(&task, 1e-12).unwrap().policy();
    let half = make_demonstrator(&task, 0.5).unwrap();
    let demos = collect_one_life(&task, &half, 50, &mut seed::rng(1, 0)).unwrap();
    let truth = RewardNet::linear(task.w_star(), 0.0).unwrap();
    let r = theorem1_report(&task, &truth, &opt, &demos).unwrap();
    assert!(r.eps_inf <= 1e-15 && r.eps_phi <= 1e-12);
    assert_eq!(
        r.premise_holds,
        r.j_opt - r.j_demo > r.rhs + 1e-9 * (1.0 + r.j_opt.abs())
    );
    assert!(r.premise_holds && r.bd_achieved && r.linear_hypothesis);
    let gamma = task.mdp().gamma();
    assert!((r.rhs - (r.eps_phi + 2.0 * r.eps_inf / (1.0 - gamma))).abs() < 1e-15);
}

#[test]
fn optimal_demonstrator_leaves_no_headroom() {
    // A deterministic chain with an exact planner demonstrator: J(D) equals J_opt.
    let (w, h) = (5, 1);
    let mut rho0 = vec![0.0; w * h];
    rho0[0] = 1.0;
    let mdp = MdpSpec::new(w, h, 0.9, 400, vec![], 0.0, rho0).unwrap();
    let features = FeatureMap::new(default_features(w, h, 4, &[], &[]), DEFAULT_PHI_MAX).unwrap();
    let task = TaskSpec::new(
        mdp,
        features,
        vec![0.3, 0.2, 0.12, 0.06, 0.02, -0.05, -0.1, -0.15],
        "chain",
    )
    .unwrap();
    let opt = env::value_iteration(&task, 1e-12).unwrap().policy();
    let demos = collect_one_life(&task, &opt, 5, &mut seed::rng(0, 0)).unwrap();
    for scale in [1.0, 0.5, -0.3] {
        let r_hat = RewardNet::linear(&task.w_star().iter().map(|x| x * scale).collect::<Vec<_>>(), 0.0).unwrap();
        let r = theorem1_report(&task, &r_hat, &opt, &demos).unwrap();
        assert!(r.lhs <= 1e-12, "lhs {}", r.lhs);
        assert!(!r.premise_holds);
    }
}

#[test]
fn demonstrator_compared_with_itself_has_zero_margin() {
    let dist = TaskDistribution {
        template: LayoutTemplate {
            horizon: 700,
            ..LayoutTemplate::default()
        },
        ..TaskDistribution::default()
    };
    let task = dist.sample_task(4);
    let half = make_demonstrator(&task, 0.5).unwrap();
    let demos = collect_one_life(&task, &half, 4000, &mut seed::rng(5, 0)).unwrap();
    let returns: Vec<f64> = demos
        .iter()
        .map(|t| visit_return(t, task.w_star(), task.mdp().gamma()))
        .collect();
    let (_, se) = env::mean_and_stderr(&returns);
    let b = bdil_check(&task, &half, &demos).unwrap();
    assert!(b.margin.abs() <= 3.0 * se, "margin {} se {se}", b.margin);
}

#[test]
fn bdil_flags_follow_the_ordering_of_returns() {
    let task = task(6);
    let opt = env::value_iteration(&task, 1e-12).unwrap().policy();
    let random = make_demonstrator(&task, 1.0).unwrap();
    let random_demos = collect_one_life(&task, &random, 50, &mut seed::rng(2, 0)).unwrap();
    assert!(bdil_check(&task, &opt, &random_demos).unwrap().achieved);

    let best: Trajectory = collect_one_life(&task, &opt, 200, &mut seed::rng(2, 1))
        .unwrap()
        .into_iter()
        .max_by(|a, b| {
            let g = task.mdp().gamma();
            visit_return(a, task.w_star(), g).total_cmp(&visit_return(b, task.w_star(), g))
        })
        .unwrap();
    let b = bdil_check(&task, &TabularPolicy::uniform(task.n_states()), &[best]).unwrap();
    assert!(!b.achieved && b.margin < 0.0);
}

#[test]
fn reports_need_matching_dimensions_and_demonstrations() {
    let task = task(7);
    let opt = env::value_iteration(&task, 1e-12).unwrap().policy();
    assert!(bdil_check(&task, &opt, &[]).is_err());
    let wrong = RewardNet::<f64>::zeros(&[3, 1]).unwrap();
    let demos = collect_one_life(&task, &opt, 2, &mut seed::rng(0, 0)).unwrap();
    assert!(theorem1_report(&task, &wrong, &opt, &demos).is_err());
}
