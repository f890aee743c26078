//! Box-constrained limited-memory quasi-Newton minimization.
//!
//! Projected L-BFGS: the two-loop recursion runs on the free variables, the
//! step is projected back onto the box and accepted by a backtracking Armijo
//! search along the projected path.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("objective failed at the initial point")]
    InitialEvaluation,
    #[error("dimension mismatch: x0 has {x0}, bounds have {bounds}")]
    Dimension { x0: usize, bounds: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLbfgs {
    pub max_iter: usize,
    pub memory: usize,
    /// Relative objective change treated as stalled.
    pub f_tol: f64,
    /// Projected-gradient infinity norm treated as stationary.
    pub pg_tol: f64,
    /// Projected-gradient norm below which a run counts as converged.
    pub converged_pg: f64,
}

impl Default for BoxLbfgs {
    fn default() -> Self {
        Self { max_iter: 200, memory: 10, f_tol: 1e-7, pg_tol: 1e-6, converged_pg: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

impl Minimum {
    pub fn projected_grad_norm(&self, bounds: &[(f64, f64)]) -> f64 {
        projected_gradient(&self.x, &self.grad, bounds).iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

fn projected_gradient(x: &[f64], g: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(bounds)
        .map(|((xi, gi), (lo, hi))| xi - (xi - gi).clamp(*lo, *hi))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl BoxLbfgs {
    /// Minimizes `objective` inside `bounds` from `x0`. The objective returns
    /// `None` on numerical failure; the line search treats that as an
    /// infinitely bad point.
    pub fn minimize<F>(&self, mut objective: F, x0: &[f64], bounds: &[(f64, f64)]) -> Result<Minimum, OptimError>
    where
        F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    {
        if x0.len() != bounds.len() {
            return Err(OptimError::Dimension { x0: x0.len(), bounds: bounds.len() });
        }
        let n = x0.len();
        let mut x = x0.to_vec();
        project(&mut x, bounds);
        let mut evaluations = 1;
        let (mut f, mut g) = match objective(&x) {
            Some((f, g)) if f.is_finite() => (f, g),
            _ => return Err(OptimError::InitialEvaluation),
        };
        let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
        let mut stalls = 0;
        let mut iterations = 0;

        while iterations < self.max_iter {
            let pg = projected_gradient(&x, &g, bounds);
            let pg_norm = pg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if pg_norm <= self.pg_tol {
                break;
            }
            iterations += 1;

            let free: Vec<bool> = (0..n)
                .map(|i| {
                    let (lo, hi) = bounds[i];
                    !((x[i] <= lo && g[i] > 0.0) || (x[i] >= hi && g[i] < 0.0))
                })
                .collect();
            let masked = |v: &[f64]| -> Vec<f64> {
                v.iter().zip(&free).map(|(a, &f)| if f { *a } else { 0.0 }).collect()
            };

            let mut accepted = None;
            for attempt in 0..2 {
                if attempt == 1 {
                    if history.is_empty() {
                        break;
                    }
                    history.clear();
                }
                let mut d = if history.is_empty() {
                    masked(&g).iter().map(|v| -v).collect::<Vec<_>>()
                } else {
                    let q = two_loop(&masked(&g), &history);
                    masked(&q).iter().map(|v| -v).collect()
                };
                if dot(&d, &g) >= 0.0 {
                    history.clear();
                    d = masked(&g).iter().map(|v| -v).collect();
                }
                let mut t = if history.is_empty() {
                    let dn = dot(&d, &d).sqrt();
                    if dn > 0.0 { (1.0 / dn).min(1.0) } else { 0.0 }
                } else {
                    1.0
                };
                if t == 0.0 {
                    break;
                }
                for _ in 0..40 {
                    let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                    project(&mut xt, bounds);
                    let step: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let decrease = dot(&g, &step);
                    if step.iter().all(|s| *s == 0.0) {
                        break;
                    }
                    evaluations += 1;
                    if let Some((ft, gt)) = objective(&xt) {
                        if ft.is_finite() && ft <= f + 1e-4 * decrease {
                            accepted = Some((xt, ft, gt, step));
                            break;
                        }
                    }
                    t *= 0.5;
                }
                if accepted.is_some() {
                    break;
                }
            }

            let Some((xt, ft, gt, s)) = accepted else {
                break;
            };
            let yv: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &yv);
            if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() {
                history.push_back((s, yv, 1.0 / sy));
                if history.len() > self.memory {
                    history.pop_front();
                }
            }
            let change = (f - ft).abs() / f.abs().max(ft.abs()).max(1.0);
            x = xt;
            f = ft;
            g = gt;
            if change <= self.f_tol {
                stalls += 1;
                let pg_now = projected_gradient(&x, &g, bounds).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if pg_now <= self.converged_pg || stalls >= 3 {
                    break;
                }
            } else {
                stalls = 0;
            }
        }

        let mut out = Minimum { x, f, grad: g, iterations, evaluations, converged: false };
        out.converged = out.projected_grad_norm(bounds) <= self.converged_pg;
        Ok(out)
    }
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q
}
