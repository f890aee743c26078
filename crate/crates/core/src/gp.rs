//! Exact Gaussian-process regression over kernel expressions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{param_schema, BaseKernel, KernelExpr, ParamSchema};

/// Quantile multiplier for the 95% predictive band.
pub const BAND_Z: f64 = 1.96;

/// Diagonal jitter tried, in order, when a plain factorization fails.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { got: usize, expected: usize },
    #[error("x and y lengths differ ({x} vs {y})")]
    LengthMismatch { x: usize, y: usize },
}

/// Kernel hyperparameters in optimizer space followed by the log noise
/// variance. Positive parameters are stored as logs; the LIN offset is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    /// Builds a vector from natural-unit kernel values and a noise variance.
    pub fn from_natural(schema: &ParamSchema, kernel: &[f64], noise_variance: f64) -> Self {
        assert_eq!(kernel.len(), schema.k_kernel(), "kernel value count");
        let mut v: Vec<f64> =
            schema.params.iter().zip(kernel).map(|(p, &x)| p.from_natural(x)).collect();
        v.push(noise_variance.ln());
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn noise_variance(&self) -> f64 {
        self.0.last().copied().unwrap_or(f64::NEG_INFINITY).exp()
    }

    /// Kernel parameters in natural units.
    pub fn natural(&self, schema: &ParamSchema) -> Vec<f64> {
        schema.params.iter().zip(&self.0).map(|(p, &v)| p.to_natural(v)).collect()
    }

    pub fn check_len(&self, schema: &ParamSchema) -> Result<(), GpError> {
        if self.0.len() != schema.n_params() {
            return Err(GpError::ParamLength { got: self.0.len(), expected: schema.n_params() });
        }
        Ok(())
    }

    pub fn within_bounds(&self, schema: &ParamSchema) -> bool {
        self.0.len() == schema.n_params()
            && self.0.iter().zip(schema.bounds()).all(|(v, (lo, hi))| *v >= lo && *v <= hi)
    }

    pub fn clamp_to(&mut self, schema: &ParamSchema) {
        for (v, (lo, hi)) in self.0.iter_mut().zip(schema.bounds()) {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Posterior predictive on a grid. Variance includes observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub grid_x: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub low_q: Vec<f64>,
    pub high_q: Vec<f64>,
}

impl Posterior {
    pub fn band_width(&self) -> Vec<f64> {
        self.high_q.iter().zip(&self.low_q).map(|(h, l)| h - l).collect()
    }
}

fn leaf_value(kind: BaseKernel, p: &[f64], x1: f64, x2: f64) -> f64 {
    match kind {
        BaseKernel::Se => {
            let d = x1 - x2;
            p[0] * (-d * d / (2.0 * p[1] * p[1])).exp()
        }
        BaseKernel::Per => {
            let s = (std::f64::consts::PI * (x1 - x2).abs() / p[2]).sin();
            p[0] * (-2.0 * s * s / (p[1] * p[1])).exp()
        }
        BaseKernel::Lin => p[0] * (x1 - p[1]) * (x2 - p[1]),
        BaseKernel::C => p[0],
        BaseKernel::Wn => {
            if x1 == x2 {
                p[0]
            } else {
                0.0
            }
        }
    }
}

fn n_leaf_params(kind: BaseKernel) -> usize {
    crate::kernel::schema_leaf_len(kind)
}

fn eval_scalar(expr: &KernelExpr, natural: &[f64], offset: &mut usize, x1: f64, x2: f64) -> f64 {
    match expr {
        KernelExpr::Leaf(kind) => {
            let n = n_leaf_params(*kind);
            let v = leaf_value(*kind, &natural[*offset..*offset + n], x1, x2);
            *offset += n;
            v
        }
        KernelExpr::Sum(c) => c.iter().map(|c| eval_scalar(c, natural, offset, x1, x2)).sum(),
        KernelExpr::Product(c) => {
            c.iter().map(|c| eval_scalar(c, natural, offset, x1, x2)).product()
        }
    }
}

/// k(x1, x2) for a canonical expression and a parameter vector.
pub fn kernel_value(expr: &KernelExpr, params: &ParamVector, x1: f64, x2: f64) -> f64 {
    let schema = param_schema(expr);
    let natural = params.natural(&schema);
    let expr = expr.canonicalize();
    eval_scalar(&expr, &natural, &mut 0, x1, x2)
}

/// Cross-covariance matrix `K(a, b)` from natural parameters.
pub fn cross_covariance(expr: &KernelExpr, natural: &[f64], a: &[f64], b: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| eval_scalar(expr, natural, &mut 0, a[i], b[j]))
}

/// Leaf covariance and its derivatives w.r.t. optimizer-space parameters.
fn leaf_matrices(kind: BaseKernel, p: &[f64], x: &[f64]) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let n = x.len();
    let np = n_leaf_params(kind);
    let mut k = DMatrix::zeros(n, n);
    let mut d: Vec<DMatrix<f64>> = (0..np).map(|_| DMatrix::zeros(n, n)).collect();
    let pi = std::f64::consts::PI;
    for j in 0..n {
        for i in j..n {
            let (x1, x2) = (x[i], x[j]);
            let (v, grads): (f64, [f64; 3]) = match kind {
                BaseKernel::Se => {
                    let r2 = (x1 - x2).powi(2);
                    let l2 = p[1] * p[1];
                    let v = p[0] * (-r2 / (2.0 * l2)).exp();
                    (v, [v, v * r2 / l2, 0.0])
                }
                BaseKernel::Per => {
                    let arg = pi * (x1 - x2).abs() / p[2];
                    let s = arg.sin();
                    let l2 = p[1] * p[1];
                    let v = p[0] * (-2.0 * s * s / l2).exp();
                    // d/dlog(period) = v * (2/l^2) * sin(2 arg) * arg
                    (v, [v, v * 4.0 * s * s / l2, v * (2.0 / l2) * (2.0 * arg).sin() * arg])
                }
                BaseKernel::Lin => {
                    let v = p[0] * (x1 - p[1]) * (x2 - p[1]);
                    (v, [v, -p[0] * (x1 + x2 - 2.0 * p[1]), 0.0])
                }
                BaseKernel::C => (p[0], [p[0], 0.0, 0.0]),
                BaseKernel::Wn => {
                    let v = if x1 == x2 { p[0] } else { 0.0 };
                    (v, [v, 0.0, 0.0])
                }
            };
            k[(i, j)] = v;
            k[(j, i)] = v;
            for (m, g) in d.iter_mut().zip(grads) {
                m[(i, j)] = g;
                m[(j, i)] = g;
            }
        }
    }
    (k, d)
}

/// Training covariance and its derivative matrices, one per kernel parameter
/// in schema order.
fn covariance_with_grad(
    expr: &KernelExpr,
    natural: &[f64],
    offset: &mut usize,
    x: &[f64],
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    match expr {
        KernelExpr::Leaf(kind) => {
            let n = n_leaf_params(*kind);
            let out = leaf_matrices(*kind, &natural[*offset..*offset + n], x);
            *offset += n;
            out
        }
        KernelExpr::Sum(children) => {
            let mut k = DMatrix::zeros(x.len(), x.len());
            let mut grads = Vec::new();
            for c in children {
                let (kc, gc) = covariance_with_grad(c, natural, offset, x);
                k += kc;
                grads.extend(gc);
            }
            (k, grads)
        }
        KernelExpr::Product(children) => {
            let parts: Vec<_> =
                children.iter().map(|c| covariance_with_grad(c, natural, offset, x)).collect();
            let mut k = DMatrix::from_element(x.len(), x.len(), 1.0);
            for (kc, _) in &parts {
                k.component_mul_assign(kc);
            }
            let mut grads = Vec::new();
            for (ci, (_, gc)) in parts.iter().enumerate() {
                let mut others = DMatrix::from_element(x.len(), x.len(), 1.0);
                for (oi, (ko, _)) in parts.iter().enumerate() {
                    if oi != ci {
                        others.component_mul_assign(ko);
                    }
                }
                for g in gc {
                    grads.push(g.component_mul(&others));
                }
            }
            (k, grads)
        }
    }
}

/// Cholesky factorization with the diagonal jitter ladder. Returns the
/// factor and the jitter that was needed (0 when none).
pub fn factorize(mut k: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(GpError::Numerical("non-finite covariance entry".into()));
    }
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok((c, 0.0));
    }
    let mut applied = 0.0;
    for jitter in JITTER_LADDER {
        k.set_diagonal(&(k.diagonal().add_scalar(jitter - applied)));
        applied = jitter;
        if let Some(c) = Cholesky::new(k.clone()) {
            log::debug!("covariance factorized with jitter {jitter:e}");
            return Ok((c, jitter));
        }
    }
    Err(GpError::Numerical("covariance not positive definite at maximum jitter".into()))
}

fn check_xy(x: &[f64], y: &[f64]) -> Result<(), GpError> {
    if x.len() != y.len() {
        return Err(GpError::LengthMismatch { x: x.len(), y: y.len() });
    }
    Ok(())
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log N(y | 0, K + σ_n² I)`.
pub fn log_marginal_likelihood(
    expr: &KernelExpr,
    params: &ParamVector,
    x: &[f64],
    y: &[f64],
) -> Result<f64, GpError> {
    check_xy(x, y)?;
    let schema = param_schema(expr);
    params.check_len(&schema)?;
    let expr = expr.canonicalize();
    let natural = params.natural(&schema);
    let mut k = cross_covariance(&expr, &natural, x, x);
    for i in 0..x.len() {
        k[(i, i)] += params.noise_variance();
    }
    let (chol, _) = factorize(k)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let ll = -0.5 * yv.dot(&alpha) - 0.5 * log_det(&chol) - 0.5 * x.len() as f64 * LN_2PI;
    if ll.is_finite() {
        Ok(ll)
    } else {
        Err(GpError::Numerical("non-finite log likelihood".into()))
    }
}

/// Negative log marginal likelihood and its gradient with respect to the
/// optimizer-space parameters (noise last).
pub fn nll_and_gradient(
    expr: &KernelExpr,
    params: &ParamVector,
    x: &[f64],
    y: &[f64],
) -> Result<(f64, Vec<f64>), GpError> {
    check_xy(x, y)?;
    let schema = param_schema(expr);
    params.check_len(&schema)?;
    let expr = expr.canonicalize();
    let natural = params.natural(&schema);
    let n = x.len();
    let (mut k, dk) = covariance_with_grad(&expr, &natural, &mut 0, x);
    let noise = params.noise_variance();
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let (chol, _) = factorize(k)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let nll = 0.5 * yv.dot(&alpha) + 0.5 * log_det(&chol) + 0.5 * n as f64 * LN_2PI;
    if !nll.is_finite() {
        return Err(GpError::Numerical("non-finite log likelihood".into()));
    }
    // W = K^-1 - alpha alpha^T; d nll / d theta = 0.5 tr(W dK)
    let mut w = chol.inverse();
    w.ger(-1.0, &alpha, &alpha, 1.0);
    let mut grad: Vec<f64> = dk.iter().map(|d| 0.5 * w.dot(d)).collect();
    grad.push(0.5 * noise * w.trace());
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(GpError::Numerical("non-finite gradient".into()));
    }
    Ok((nll, grad))
}

/// Gradient of the negative log marginal likelihood in optimizer space.
pub fn nll_gradient(
    expr: &KernelExpr,
    params: &ParamVector,
    x: &[f64],
    y: &[f64],
) -> Result<Vec<f64>, GpError> {
    nll_and_gradient(expr, params, x, y).map(|(_, g)| g)
}

/// Posterior predictive at `grid_x`, conditioned on the training data.
pub fn posterior_predict(
    expr: &KernelExpr,
    params: &ParamVector,
    x_train: &[f64],
    y_train: &[f64],
    grid_x: &[f64],
) -> Result<Posterior, GpError> {
    check_xy(x_train, y_train)?;
    let schema = param_schema(expr);
    params.check_len(&schema)?;
    let expr = expr.canonicalize();
    let natural = params.natural(&schema);
    let noise = params.noise_variance();
    let prior_diag: Vec<f64> =
        grid_x.iter().map(|&g| eval_scalar(&expr, &natural, &mut 0, g, g)).collect();

    let (mean, latent_var) = if x_train.is_empty() {
        (vec![0.0; grid_x.len()], prior_diag)
    } else {
        let mut k = cross_covariance(&expr, &natural, x_train, x_train);
        for i in 0..x_train.len() {
            k[(i, i)] += noise;
        }
        let (chol, _) = factorize(k)?;
        let alpha = chol.solve(&DVector::from_column_slice(y_train));
        let k_star = cross_covariance(&expr, &natural, x_train, grid_x);
        let mean = (k_star.transpose() * &alpha).iter().copied().collect();
        let mut v = k_star;
        chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let var = prior_diag
            .iter()
            .enumerate()
            .map(|(j, kss)| kss - v.column(j).norm_squared())
            .collect();
        (mean, var)
    };
    let variance: Vec<f64> = latent_var.iter().map(|v| v.max(0.0) + noise).collect();
    let sd: Vec<f64> = variance.iter().map(|v| v.sqrt()).collect();
    let low_q = mean.iter().zip(&sd).map(|(m, s)| m - BAND_Z * s).collect();
    let high_q = mean.iter().zip(&sd).map(|(m, s)| m + BAND_Z * s).collect();
    if mean.iter().chain(&variance).any(|v: &f64| !v.is_finite()) {
        return Err(GpError::Numerical("non-finite posterior".into()));
    }
    Ok(Posterior { grid_x: grid_x.to_vec(), mean, variance, low_q, high_q })
}
