//! Independent reference implementations shared by the integration and
//! acceptance tests. Nothing here calls into the library's numerical code:
//! covariances are rebuilt from the base-kernel formulas and the Gaussian
//! likelihood uses a dense inverse and an LU determinant.

#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vicsearch_core::{BaseKernel, KernelExpr, ParamVector};

pub const KINDS: [BaseKernel; 5] =
    [BaseKernel::Lin, BaseKernel::Per, BaseKernel::Se, BaseKernel::C, BaseKernel::Wn];

/// Random expression of nesting depth at most `max_depth` and at most
/// `max_leaves` leaves, built from raw (uncanonicalized) sums and products.
pub fn random_expr(rng: &mut ChaCha8Rng, max_depth: usize, max_leaves: usize) -> KernelExpr {
    fn go(rng: &mut ChaCha8Rng, depth: usize, budget: &mut usize) -> KernelExpr {
        if depth <= 1 || *budget < 2 || rng.random_bool(0.4) {
            *budget = budget.saturating_sub(1);
            return KernelExpr::Leaf(KINDS[rng.random_range(0..KINDS.len())]);
        }
        let arity = rng.random_range(2..=3);
        let mut children = Vec::new();
        for _ in 0..arity {
            if *budget == 0 {
                break;
            }
            children.push(go(rng, depth - 1, budget));
        }
        if children.len() == 1 {
            return children.pop().unwrap();
        }
        if rng.random_bool(0.5) {
            KernelExpr::Sum(children)
        } else {
            KernelExpr::Product(children)
        }
    }
    let mut budget = max_leaves;
    go(rng, max_depth, &mut budget)
}

/// Natural-unit parameters per leaf in the order the base kernel declares
/// them: SE(variance, lengthscale), PER(variance, lengthscale, period),
/// LIN(variance, offset), C(variance), WN(variance).
pub fn leaf_arity(kind: BaseKernel) -> usize {
    match kind {
        BaseKernel::Se => 2,
        BaseKernel::Per => 3,
        BaseKernel::Lin => 2,
        BaseKernel::C | BaseKernel::Wn => 1,
    }
}

/// A well-conditioned draw inside the optimizer bounds, in natural units.
pub fn random_leaf_params(rng: &mut ChaCha8Rng, kind: BaseKernel) -> Vec<f64> {
    let log_uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo.ln()..hi.ln()).exp();
    let var = log_uniform(rng, 0.2, 3.0);
    match kind {
        BaseKernel::Se => vec![var, log_uniform(rng, 0.05, 1.5)],
        BaseKernel::Per => vec![var, log_uniform(rng, 0.3, 2.0), log_uniform(rng, 0.1, 1.0)],
        BaseKernel::Lin => vec![var, rng.random_range(-1.0..1.0)],
        BaseKernel::C | BaseKernel::Wn => vec![var],
    }
}

fn leaf_value(kind: BaseKernel, p: &[f64], a: f64, b: f64) -> f64 {
    match kind {
        BaseKernel::Se => p[0] * (-0.5 * ((a - b) / p[1]).powi(2)).exp(),
        BaseKernel::Per => p[0] * (-2.0 * ((PI * (a - b) / p[2]).sin() / p[1]).powi(2)).exp(),
        BaseKernel::Lin => p[0] * (a - p[1]) * (b - p[1]),
        BaseKernel::C => p[0],
        BaseKernel::Wn => {
            if a == b {
                p[0]
            } else {
                0.0
            }
        }
    }
}

/// Covariance of a canonical expression whose leaves consume `natural`
/// depth-first.
pub fn naive_kernel(expr: &KernelExpr, natural: &[f64], a: f64, b: f64) -> f64 {
    fn go(e: &KernelExpr, p: &[f64], at: &mut usize, a: f64, b: f64) -> f64 {
        match e {
            KernelExpr::Leaf(k) => {
                let n = leaf_arity(*k);
                let v = leaf_value(*k, &p[*at..*at + n], a, b);
                *at += n;
                v
            }
            KernelExpr::Sum(c) => c.iter().fold(0.0, |s, c| s + go(c, p, at, a, b)),
            KernelExpr::Product(c) => c.iter().fold(1.0, |s, c| s * go(c, p, at, a, b)),
        }
    }
    let mut at = 0;
    let v = go(expr, natural, &mut at, a, b);
    assert_eq!(at, natural.len(), "parameter count mismatch");
    v
}

/// A random canonical instance: expression, natural kernel parameters and
/// noise variance.
pub struct Instance {
    pub expr: KernelExpr,
    pub natural: Vec<f64>,
    pub noise: f64,
}

impl Instance {
    pub fn draw(rng: &mut ChaCha8Rng, max_depth: usize, max_leaves: usize) -> Self {
        let expr = random_expr(rng, max_depth, max_leaves).canonicalize();
        let natural = expr.leaves().into_iter().flat_map(|k| random_leaf_params(rng, k)).collect();
        let noise = rng.random_range(0.01f64.ln()..1.0f64.ln()).exp();
        Self { expr, natural, noise }
    }

    /// Optimizer-space vector: logs of positive parameters, offsets as-is,
    /// noise last.
    pub fn param_vector(&self) -> ParamVector {
        let mut v = Vec::new();
        let mut at = 0;
        for k in self.expr.leaves() {
            let p = &self.natural[at..at + leaf_arity(k)];
            match k {
                BaseKernel::Lin => v.extend([p[0].ln(), p[1]]),
                _ => v.extend(p.iter().map(|x| x.ln())),
            }
            at += leaf_arity(k);
        }
        v.push(self.noise.ln());
        ParamVector::new(v)
    }

    pub fn gram(&self, a: &[f64], b: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| naive_kernel(&self.expr, &self.natural, a[i], b[j]))
    }

    fn noisy_gram(&self, x: &[f64]) -> DMatrix<f64> {
        self.gram(x, x) + DMatrix::identity(x.len(), x.len()) * self.noise
    }

    /// `-0.5 yᵀK⁻¹y - 0.5 ln|K| - n/2 ln 2π` with an explicit inverse.
    pub fn log_marginal_likelihood(&self, x: &[f64], y: &[f64]) -> f64 {
        let k = self.noisy_gram(x);
        let inv = k.clone().try_inverse().expect("singular oracle covariance");
        let lu = k.lu();
        let log_det: f64 = lu.u().diagonal().iter().map(|d| d.abs().ln()).sum();
        let y = DVector::from_column_slice(y);
        -0.5 * (y.transpose() * inv * &y)[(0, 0)] - 0.5 * log_det - 0.5 * x.len() as f64 * (2.0 * PI).ln()
    }

    /// Predictive mean and variance (observation noise included).
    pub fn posterior(&self, x: &[f64], y: &[f64], grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let inv = self.noisy_gram(x).try_inverse().expect("singular oracle covariance");
        let ks = self.gram(x, grid);
        let mean = ks.transpose() * &inv * DVector::from_column_slice(y);
        let var = grid
            .iter()
            .enumerate()
            .map(|(j, &g)| {
                let col = ks.column(j);
                naive_kernel(&self.expr, &self.natural, g, g) - (col.transpose() * &inv * col)[(0, 0)] + self.noise
            })
            .collect();
        (mean.iter().copied().collect(), var)
    }

    /// A draw from this GP prior at `x`.
    pub fn sample(&self, rng: &mut ChaCha8Rng, x: &[f64]) -> Vec<f64> {
        let chol = self.noisy_gram(x).cholesky().expect("prior covariance is not positive definite");
        let z = DVector::from_iterator(x.len(), (0..x.len()).map(|_| standard_normal(rng)));
        (chol.l() * z).iter().copied().collect()
    }
}

pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    Normal::new(0.0, 1.0).unwrap().sample(rng)
}

/// `n` sorted inputs drawn uniformly from [0, 1].
pub fn sorted_inputs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    x.sort_by(f64::total_cmp);
    x
}

/// `y = 0.5 x + sin(2πx / 0.1) + N(0, 0.05²)` on `n` evenly spaced points
/// in [0, 1].
pub fn lin_plus_periodic(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let y = x.iter().map(|&x| 0.5 * x + (2.0 * PI * x / 0.1).sin() + noise.sample(&mut rng)).collect();
    (x, y)
}

/// `|a - b| <= tol * max(1, |a|, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}
