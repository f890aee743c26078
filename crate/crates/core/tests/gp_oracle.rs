mod common;

use common::{close, sorted_inputs, Instance};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vicsearch_core::gp::{kernel_value, log_marginal_likelihood, nll_gradient, posterior_predict};

const LOGML_TOL: f64 = 1e-8;
const POSTERIOR_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn instance_and_data(seed: u64, max_n: usize) -> (Instance, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = Instance::draw(&mut rng, 4, 6);
    let n = rng.random_range(3..=max_n);
    let x = sorted_inputs(&mut rng, n);
    let y = inst.sample(&mut rng, &x);
    (inst, x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_value_matches_the_formulas(seed in any::<u64>(), a in -1.0f64..2.0, b in -1.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = Instance::draw(&mut rng, 4, 8);
        let params = inst.param_vector();
        for (p, q) in [(a, b), (a, a), (b, a)] {
            let got = kernel_value(&inst.expr, &params, p, q);
            let want = common::naive_kernel(&inst.expr, &inst.natural, p, q);
            prop_assert!(close(got, want, 1e-12), "{}: {got} vs {want}", inst.expr);
        }
    }

    #[test]
    fn log_marginal_likelihood_matches_dense_oracle(seed in any::<u64>()) {
        let (inst, x, y) = instance_and_data(seed, 50);
        let got = log_marginal_likelihood(&inst.expr, &inst.param_vector(), &x, &y).unwrap();
        let want = inst.log_marginal_likelihood(&x, &y);
        prop_assert!((got - want).abs() <= LOGML_TOL, "{}: {got} vs {want}", inst.expr);
    }

    #[test]
    fn posterior_matches_dense_oracle(seed in any::<u64>()) {
        let (inst, x, y) = instance_and_data(seed, 50);
        let grid: Vec<f64> = (0..40).map(|i| -0.2 + 1.4 * i as f64 / 39.0).collect();
        let post = posterior_predict(&inst.expr, &inst.param_vector(), &x, &y, &grid).unwrap();
        let (mean, var) = inst.posterior(&x, &y, &grid);
        for j in 0..grid.len() {
            prop_assert!((post.mean[j] - mean[j]).abs() <= POSTERIOR_TOL, "mean[{j}] {} vs {}", post.mean[j], mean[j]);
            prop_assert!((post.variance[j] - var[j]).abs() <= POSTERIOR_TOL, "var[{j}] {} vs {}", post.variance[j], var[j]);
            prop_assert!(post.low_q[j] <= post.mean[j] && post.mean[j] <= post.high_q[j]);
        }
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>()) {
        let (inst, x, y) = instance_and_data(seed, 30);
        let theta = inst.param_vector();
        let grad = nll_gradient(&inst.expr, &theta, &x, &y).unwrap();
        prop_assert_eq!(grad.len(), theta.len());
        let nll = |v: &[f64]| -log_marginal_likelihood(&inst.expr, &vicsearch_core::ParamVector::new(v.to_vec()), &x, &y).unwrap();
        for i in 0..theta.len() {
            let mut hi = theta.values().to_vec();
            let mut lo = hi.clone();
            hi[i] += FD_STEP;
            lo[i] -= FD_STEP;
            let fd = (nll(&hi) - nll(&lo)) / (2.0 * FD_STEP);
            prop_assert!(close(grad[i], fd, FD_TOL), "{} d{i}: {} vs {fd}", inst.expr, grad[i]);
        }
    }
}

#[test]
fn white_noise_only_touches_coincident_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = loop {
        let inst = Instance::draw(&mut rng, 1, 1);
        if inst.expr.to_string() == "WN" {
            break inst;
        }
    };
    let params = inst.param_vector();
    assert_eq!(kernel_value(&inst.expr, &params, 0.3, 0.3), inst.natural[0]);
    assert_eq!(kernel_value(&inst.expr, &params, 0.3, 0.3 + 1e-12), 0.0);
}
