use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::expr::FuncExpr;
use super::SrError;
use crate::dataset::Dataset;
use crate::fitting::derive_seed;

/// Range of the uniform draw for coefficients of restarts after the first.
pub const INIT_RANGE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrFitOptions {
    pub n_restarts: usize,
    pub max_iter: usize,
    /// Relative RSS decrease below which an iteration counts as converged.
    pub tol: f64,
}

impl Default for SrFitOptions {
    fn default() -> Self {
        Self { n_restarts: 5, max_iter: 400, tol: 1e-14 }
    }
}

/// A function expression with bound coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedFunction {
    pub expr: FuncExpr,
    pub coefficients: Vec<f64>,
    /// Residual sum of squares on the data it was fitted to.
    pub rss: f64,
    pub round_created: usize,
    pub provenance: String,
}

impl FittedFunction {
    /// The template text with placeholders, the pool key.
    pub fn text(&self) -> String {
        self.expr.to_string()
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.expr.eval(v, &self.coefficients)).collect()
    }

    /// `c0=..., c1=...` listing.
    pub fn describe_coefficients(&self) -> String {
        if self.coefficients.is_empty() {
            return "no free coefficients".into();
        }
        self.coefficients.iter().enumerate().map(|(i, c)| format!("c{i}={c:.6}")).collect::<Vec<_>>().join(", ")
    }
}

fn residuals(expr: &FuncExpr, x: &[f64], y: &[f64], c: &[f64]) -> Option<(Vec<f64>, f64)> {
    let r: Vec<f64> = x.iter().zip(y).map(|(&xi, &yi)| yi - expr.eval(xi, c)).collect();
    let rss: f64 = r.iter().map(|v| v * v).sum();
    rss.is_finite().then_some((r, rss))
}

/// Levenberg–Marquardt from `start`; `None` when the start is not finite.
fn levenberg_marquardt(expr: &FuncExpr, x: &[f64], y: &[f64], start: Vec<f64>, opts: &SrFitOptions) -> Option<(Vec<f64>, f64)> {
    let k = start.len();
    let n = x.len();
    let mut c = start;
    let (mut r, mut rss) = residuals(expr, x, y, &c)?;
    if k == 0 {
        return Some((c, rss));
    }
    let mut lambda = 1e-3;
    for _ in 0..opts.max_iter {
        let mut jac = DMatrix::<f64>::zeros(n, k);
        for (i, &xi) in x.iter().enumerate() {
            let (_, g) = expr.eval_grad(xi, &c);
            for (j, gj) in g.into_iter().enumerate() {
                jac[(i, j)] = gj;
            }
        }
        if jac.iter().any(|v| !v.is_finite()) {
            break;
        }
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);
        let mut accepted = None;
        for _ in 0..30 {
            let mut damped = a.clone();
            for j in 0..k {
                damped[(j, j)] += lambda * a[(j, j)].max(1e-12);
            }
            if let Some(chol) = damped.cholesky() {
                let step = chol.solve(&g);
                let trial: Vec<f64> = c.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                if let Some((r_new, rss_new)) = residuals(expr, x, y, &trial) {
                    if rss_new < rss {
                        accepted = Some((trial, r_new, rss_new));
                        lambda = (lambda * 0.1).max(1e-15);
                        break;
                    }
                }
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
        let Some((trial, r_new, rss_new)) = accepted else { break };
        let decrease = rss - rss_new;
        c = trial;
        r = r_new;
        rss = rss_new;
        if decrease <= opts.tol * rss.max(f64::MIN_POSITIVE) || rss == 0.0 {
            break;
        }
    }
    Some((c, rss))
}

/// Nonlinear least squares over `(x, y)`. The first restart starts from all
/// ones, later ones from uniform draws in `[-INIT_RANGE, INIT_RANGE]`; the
/// lowest residual sum of squares wins.
pub fn fit_function_xy(expr: &FuncExpr, x: &[f64], y: &[f64], opts: &SrFitOptions, seed: u64) -> Result<FittedFunction, SrError> {
    let k = expr.n_coefficients();
    if k > x.len() {
        return Err(SrError::Fit(format!("{expr}: {k} coefficients but only {} points", x.len())));
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for restart in 0..opts.n_restarts.max(1) {
        let start = if restart == 0 {
            vec![1.0; k]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, restart as u64));
            (0..k).map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE)).collect()
        };
        if let Some((c, rss)) = levenberg_marquardt(expr, x, y, start, opts) {
            if best.as_ref().is_none_or(|(_, b)| rss < *b) {
                best = Some((c, rss));
            }
        }
    }
    let (coefficients, rss) =
        best.ok_or_else(|| SrError::Fit(format!("{expr}: every restart produced non-finite values")))?;
    Ok(FittedFunction { expr: expr.clone(), coefficients, rss, round_created: 0, provenance: String::new() })
}

/// Fits on the training slice in data units.
pub fn fit_function(expr: &FuncExpr, dataset: &Dataset, n_restarts: usize, seed: u64) -> Result<FittedFunction, SrError> {
    let (x, y) = dataset.train_raw();
    fit_function_xy(expr, &x, &y, &SrFitOptions { n_restarts, ..SrFitOptions::default() }, seed)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean of `(y_i - pred(i))^2`.
fn mean_sq_dev(y: &[f64], pred: impl Fn(usize) -> f64) -> f64 {
    y.iter().enumerate().map(|(i, v)| (v - pred(i)).powi(2)).sum::<f64>() / y.len() as f64
}

/// MSE over the population variance of `y`. Both use the same summation,
/// so the constant mean predictor scores exactly 1.
pub fn nmse(pred: &[f64], y: &[f64]) -> Result<f64, SrError> {
    if pred.len() != y.len() {
        return Err(SrError::Degenerate("prediction and target lengths differ".into()));
    }
    Ok(mean_sq_dev(y, |i| pred[i]) / variance(y)?)
}

fn variance(y: &[f64]) -> Result<f64, SrError> {
    if y.is_empty() {
        return Err(SrError::Degenerate("empty target".into()));
    }
    let m = mean(y);
    let var = mean_sq_dev(y, |_| m);
    if !(var > 0.0) {
        return Err(SrError::Degenerate("target has zero variance".into()));
    }
    Ok(var)
}

/// `c0` bound to the training mean.
pub fn mean_predictor(y: &[f64]) -> FittedFunction {
    let m = mean(y);
    let rss = mean_sq_dev(y, |_| m) * y.len() as f64;
    FittedFunction { expr: FuncExpr::Coef(0), coefficients: vec![m], rss, round_created: 0, provenance: "mean".into() }
}

/// Serializes non-finite values as `null` and reads `null` back as `+inf`.
mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

mod neg_inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        super::inf_as_null::serialize(v, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

/// Score of one fitted function. `combined = alpha * evaluator_total -
/// objective`; a function that is not finite on the training inputs or the
/// plotting grid has `nmse = +inf`, `combined = -inf` and is never selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrScore {
    #[serde(with = "inf_as_null")]
    pub nmse: f64,
    pub complexity: usize,
    pub lambda_c: f64,
    #[serde(with = "inf_as_null")]
    pub objective: f64,
    pub fitness_score: f64,
    pub generalizability_score: f64,
    pub evaluator_total: f64,
    pub alpha: f64,
    #[serde(with = "neg_inf_as_null")]
    pub combined: f64,
    pub round_index: usize,
    pub finite: bool,
    #[serde(default)]
    pub evaluation_failed: bool,
}

impl SrScore {
    fn from_parts(nmse: f64, complexity: usize, lambda_c: f64) -> Self {
        let objective = nmse + lambda_c * complexity as f64;
        Self {
            nmse,
            complexity,
            lambda_c,
            objective,
            fitness_score: 0.0,
            generalizability_score: 0.0,
            evaluator_total: 0.0,
            alpha: 0.0,
            combined: -objective,
            round_index: 0,
            finite: nmse.is_finite(),
            evaluation_failed: false,
        }
    }

    /// Adds evaluator components (clamped to `[0, 100]` and `[0, 50]`) and
    /// recomputes the combined score.
    pub fn with_evaluation(mut self, fitness: f64, generalizability: f64, alpha: f64, round_index: usize) -> Self {
        self.fitness_score = fitness.clamp(0.0, 100.0);
        self.generalizability_score = generalizability.clamp(0.0, 50.0);
        self.evaluator_total = self.fitness_score + self.generalizability_score;
        self.alpha = alpha;
        self.round_index = round_index;
        self.combined = if self.finite { alpha * self.evaluator_total - self.objective } else { f64::NEG_INFINITY };
        self
    }

    pub fn adjusted(&self, gamma: f64, current_round: usize) -> f64 {
        self.combined - gamma * current_round.saturating_sub(self.round_index) as f64
    }
}

/// NMSE on the training slice plus `lambda_c` per expression node, with no
/// evaluator contribution yet. `extra_x` are further inputs (the plotting
/// grid) on which the function must also be finite.
pub fn sr_objective_xy(fitted: &FittedFunction, x: &[f64], y: &[f64], extra_x: &[f64], lambda_c: f64) -> Result<SrScore, SrError> {
    let pred = fitted.predict(x);
    let finite = pred.iter().chain(fitted.predict(extra_x).iter()).all(|v| v.is_finite());
    variance(y)?;
    let value = if finite { nmse(&pred, y)? } else { f64::INFINITY };
    Ok(SrScore::from_parts(value, fitted.expr.node_count(), lambda_c))
}

/// [`sr_objective_xy`] on the training slice in data units.
pub fn sr_objective(fitted: &FittedFunction, dataset: &Dataset, lambda_c: f64) -> Result<SrScore, SrError> {
    let (x, y) = dataset.train_raw();
    sr_objective_xy(fitted, &x, &y, &[], lambda_c)
}

#[cfg(test)]
mod tests {
    use super::super::expr::parse_function;
    use super::*;

    fn lin(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn linear_fit() {
        let x = lin(20);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let f = fit_function_xy(&parse_function("c0*x + c1").unwrap(), &x, &y, &SrFitOptions::default(), 1).unwrap();
        assert!((f.coefficients[0] - 2.0).abs() < 1e-6 && (f.coefficients[1] - 1.0).abs() < 1e-6, "{:?}", f.coefficients);
    }

    #[test]
    fn nonlinear_fit_uses_restarts() {
        let x: Vec<f64> = (0..60).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.5 * (2.5 * v).sin()).collect();
        let f = fit_function_xy(&parse_function("c0*sin(c1*x)").unwrap(), &x, &y, &SrFitOptions { n_restarts: 20, ..Default::default() }, 3).unwrap();
        assert!(f.rss < 1e-10, "rss {}", f.rss);
    }

    #[test]
    fn underdetermined_is_an_error() {
        let x = [0.0, 1.0];
        let y = [1.0, 2.0];
        assert!(matches!(
            fit_function_xy(&parse_function("c0 + c1*x + c2*x^2").unwrap(), &x, &y, &SrFitOptions::default(), 0),
            Err(SrError::Fit(_))
        ));
    }

    #[test]
    fn objective_identities() {
        let x = lin(30);
        let y: Vec<f64> = x.iter().map(|v| v * v + 0.3 * v).collect();
        let mean = mean_predictor(&y);
        let s = sr_objective_xy(&mean, &x, &y, &[], 1e-3).unwrap();
        assert_eq!(s.nmse, 1.0);
        let exact = FittedFunction {
            expr: parse_function("x^2 + c0*x").unwrap(),
            coefficients: vec![0.3],
            rss: 0.0,
            round_created: 0,
            provenance: String::new(),
        };
        let s = sr_objective_xy(&exact, &x, &y, &[], 1e-3).unwrap();
        assert!(s.nmse < 1e-28);
        assert_eq!(s.complexity, 6);
        assert!((s.objective - 1e-3 * 6.0).abs() < 1e-12);
        assert!(sr_objective_xy(&mean, &x, &vec![2.0; 30], &[], 1e-3).is_err());
    }

    #[test]
    fn nonfinite_is_flagged_and_serializes() {
        let x = lin(10);
        let y: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        let f = FittedFunction {
            expr: parse_function("x^-1").unwrap(),
            coefficients: vec![],
            rss: 0.0,
            round_created: 0,
            provenance: String::new(),
        };
        let s = sr_objective_xy(&f, &x, &y, &[], 1e-3).unwrap().with_evaluation(100.0, 50.0, 0.05, 1);
        assert!(!s.finite && s.nmse.is_infinite() && s.combined == f64::NEG_INFINITY);
        let json = serde_json::to_string(&s).unwrap();
        let back: SrScore = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn combined_score() {
        let s = SrScore::from_parts(0.5, 10, 0.01).with_evaluation(80.0, 40.0, 0.05, 2);
        assert!((s.combined - (0.05 * 120.0 - 0.6)).abs() < 1e-12);
        assert!((s.adjusted(1.0, 4) - (s.combined - 2.0)).abs() < 1e-12);
    }
}
