use mlre::autodiff::Var;
use mlre::reward_model::{grad, hvp, meta_grad, Graph, MetaGradMode, RewardNet};
use mlre::ParamVector32;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dense_forward(net: &RewardNet<f64>, phi: &[f64]) -> f64 {
    let sizes = net.layer_sizes();
    let p = net.params();
    let mut x = DVector::from_column_slice(phi);
    for l in 0..sizes.len() - 1 {
        let w = DMatrix::from_row_slice(sizes[l + 1], sizes[l], &p.values()[p.weight_range(l)]);
        let b = DVector::from_column_slice(&p.values()[p.bias_range(l)]);
        x = w * x + b;
        if l + 2 < sizes.len() {
            x.apply(|v| *v = v.max(0.0));
        }
    }
    x[0]
}

proptest! {
    #[test]
    fn forward_matches_dense_linear_algebra(seed in 0u64..1000, phi in prop::collection::vec(-2.0f64..2.0, 8)) {
        let net = RewardNet::<f64>::init(&[8, 16, 16, 1], seed).unwrap();
        let got = net.forward(&phi).unwrap();
        let want = dense_forward(&net, &phi);
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }
}

fn sum_of_squares<'t>(g: &Graph<'t, f64>, inputs: &[Vec<f64>]) -> Var<'t, f64> {
    let rs: Vec<_> = inputs
        .iter()
        .map(|phi| {
            let r = g.reward(phi);
            r * r
        })
        .collect();
    g.tape().sum(&rs)
}

fn random_inputs(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

#[test]
fn tape_gradient_matches_central_differences() {
    let inputs = random_inputs(1, 6, 5);
    for seed in 0..5 {
        let net = RewardNet::<f64>::init(&[5, 7, 1], seed).unwrap();
        let g = grad(&net, |g| sum_of_squares(g, &inputs)).unwrap();
        let f = |n: &RewardNet<f64>| inputs.iter().map(|phi| n.forward(phi).unwrap().powi(2)).sum::<f64>();
        for i in 0..net.n_params() {
            let h = 1e-6;
            let mut p = net.clone();
            p.params_mut().values_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut().values_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (g.grad[i] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "seed {seed} coord {i}: {} vs {fd}",
                g.grad[i]
            );
        }
    }
}

fn quartic<'t>(g: &Graph<'t, f64>, inputs: &[Vec<f64>]) -> Var<'t, f64> {
    let rs: Vec<_> = inputs
        .iter()
        .map(|phi| {
            let r = g.reward(phi);
            r * r * r * r
        })
        .collect();
    g.tape().sum(&rs)
}

#[test]
fn hvp_matches_dense_hessian_of_smooth_objective() {
    // A linear head keeps the objective a smooth quartic polynomial.
    let inputs = random_inputs(2, 5, 3);
    let net = RewardNet::<f64>::init(&[3, 1], 4).unwrap();
    let n = net.n_params();
    let mut hess = DMatrix::<f64>::zeros(n, n);
    let theta = net.params().values().to_vec();
    for phi in &inputs {
        let x: Vec<f64> = phi.iter().cloned().chain(std::iter::once(1.0)).collect();
        let r: f64 = x.iter().zip(&theta).map(|(a, b)| a * b).sum();
        for i in 0..n {
            for j in 0..n {
                hess[(i, j)] += 12.0 * r * r * x[i] * x[j];
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = hvp(&net, |g| quartic(g, &inputs), &v).unwrap();
        let want = &hess * DVector::from_column_slice(&v);
        for i in 0..n {
            assert!(
                (got[i] - want[i]).abs() <= 1e-6 * (1.0 + want[i].abs()),
                "{} vs {}",
                got[i],
                want[i]
            );
        }
    }
}

fn quad_support<'t>(g: &Graph<'t, f64>, a: &DMatrix<f64>, c: &[f64]) -> Var<'t, f64> {
    let mut terms = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            let di = g.param(i) - c[i];
            let dj = g.param(j) - c[j];
            terms.push((di * dj, 0.5 * a[(i, j)]));
        }
    }
    g.tape().linear_comb(&terms)
}

fn quad_query<'t>(g: &Graph<'t, f64>, b: &[f64]) -> Var<'t, f64> {
    let terms: Vec<_> = (0..3)
        .map(|i| {
            let d = g.param(i) - b[i];
            (d * d, 0.5)
        })
        .collect();
    g.tape().linear_comb(&terms)
}

#[test]
fn meta_gradient_matches_closed_form_on_quadratics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let m = DMatrix::<f64>::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let a = &m * m.transpose() + DMatrix::identity(3, 3) * 0.1;
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let theta: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let alpha = rng.gen_range(0.01..0.3);
        let net = RewardNet::linear(&theta[..2], theta[2]).unwrap();

        let t = DVector::from_column_slice(&theta);
        let adapted = &t - alpha * (&a * (&t - DVector::from_column_slice(&c)));
        let outer = &adapted - DVector::from_column_slice(&b);
        let exact = (DMatrix::identity(3, 3) - alpha * &a) * &outer;

        let got = meta_grad(
            &net,
            |g| quad_support(g, &a, &c),
            |g| quad_query(g, &b),
            alpha,
            MetaGradMode::Exact,
        )
        .unwrap();
        let fo = meta_grad(
            &net,
            |g| quad_support(g, &a, &c),
            |g| quad_query(g, &b),
            alpha,
            MetaGradMode::FirstOrder,
        )
        .unwrap();
        let scale = exact.amax().max(1.0);
        for i in 0..3 {
            assert!(
                (got.grad[i] - exact[i]).abs() <= 1e-6 * scale,
                "{} vs {}",
                got.grad[i],
                exact[i]
            );
            assert!((fo.grad[i] - outer[i]).abs() <= 1e-12 * scale);
        }
        assert!((got.loss - 0.5 * outer.norm_squared()).abs() <= 1e-12 * (1.0 + got.loss));
    }
}

#[test]
fn zero_alpha_meta_gradient_is_query_gradient() {
    let b = [1.0, -1.0, 0.5];
    let net = RewardNet::linear(&[0.3, 0.2], -0.4).unwrap();
    let a = DMatrix::<f64>::identity(3, 3);
    let c = [0.0; 3];
    let g = meta_grad(
        &net,
        |g| quad_support(g, &a, &c),
        |g| quad_query(g, &b),
        0.0,
        MetaGradMode::Exact,
    )
    .unwrap();
    assert_eq!(g.grad, vec![0.3 - 1.0, 0.2 + 1.0, -0.4 - 0.5]);
}

#[test]
fn single_precision_tracks_double_precision() {
    let net64 = RewardNet::<f64>::init(&[8, 32, 1], 5).unwrap();
    let vals32: Vec<f32> = net64.params().values().iter().map(|&v| v as f32).collect();
    let net32 = RewardNet::<f32>::new(ParamVector32::new(vals32, net64.params().manifest().to_vec()).unwrap()).unwrap();
    for phi in random_inputs(6, 20, 8) {
        let a = net64.forward(&phi).unwrap();
        let b = net32.forward_f64(&phi).unwrap() as f64;
        assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{a} vs {b}");
    }
}

#[test]
fn malformed_weights_are_rejected() {
    let net = RewardNet::<f64>::init(&[3, 4, 1], 0).unwrap();
    let mut file = net.to_weights_file();
    file.blocks.retain(|b| b.name != "b1");
    assert!(RewardNet::<f64>::from_weights_file(&file).is_err());
}
