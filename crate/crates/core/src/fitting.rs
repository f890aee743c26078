//! Hyperparameter fitting: multi-restart bounded optimization of the log
//! marginal likelihood, followed by an optional second stage started from
//! suggested (proposer or inherited) values.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::gp::{log_marginal_likelihood, nll_and_gradient, ParamVector};
use crate::kernel::{param_schema, KernelExpr, ParamSchema};
use crate::optim::BoxLbfgs;

/// Noise variance range for random initialization.
pub const INIT_NOISE_RANGE: (f64, f64) = (1e-4, 1.0);

#[derive(Debug, Clone, PartialEq, Error)]
#[error("all {} fitting runs failed for {kernel}", .runs.len())]
pub struct FitError {
    pub kernel: String,
    pub runs: Vec<RunDiagnostics>,
}

/// Suggested starting values keyed by parameter label (`PER.period`), in
/// natural units on the normalized scale.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InitSuggestion(pub BTreeMap<String, f64>);

impl InitSuggestion {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, label: impl Into<String>, value: f64) {
        self.0.insert(label.into(), value);
    }

    /// Entries of `other` win on conflicts.
    pub fn merged_with(&self, other: &InitSuggestion) -> InitSuggestion {
        let mut out = self.clone();
        out.0.extend(other.0.iter().map(|(k, v)| (k.clone(), *v)));
        out
    }

    /// Keeps only labels present in the schema with finite values; dropped
    /// entries are logged.
    pub fn validated(&self, schema: &ParamSchema) -> InitSuggestion {
        let mut out = InitSuggestion::default();
        for (label, &value) in &self.0 {
            match schema.find(label) {
                Some(i) if value.is_finite() && (schema.params[i].is_log() && value > 0.0 || !schema.params[i].is_log()) => {
                    out.insert(schema.params[i].label(), value);
                }
                _ => log::warn!("dropping init suggestion {label}={value}: not a valid coordinate"),
            }
        }
        out
    }

    /// Optimizer-space coordinates, clamped to bounds.
    fn coordinates(&self, schema: &ParamSchema) -> Vec<(usize, f64)> {
        self.0
            .iter()
            .filter_map(|(label, &value)| {
                let i = schema.find(label)?;
                let p = &schema.params[i];
                if p.is_log() && value <= 0.0 {
                    return None;
                }
                Some((i, p.from_natural(value).clamp(p.lower, p.upper)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub stage: u8,
    pub seed: u64,
    pub loglik: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub runs: Vec<RunDiagnostics>,
    /// Whether the returned parameters came from the suggestion stage.
    pub from_stage2: bool,
    pub converged: bool,
    pub stage1_best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub expr: KernelExpr,
    pub params: ParamVector,
    pub train_loglik: f64,
    pub round_created: usize,
    pub provenance: String,
    pub diagnostics: FitDiagnostics,
}

impl FittedModel {
    pub fn text(&self) -> String {
        self.expr.canonical_text()
    }

    /// Natural-unit parameters keyed by label, noise included.
    pub fn describe_params(&self) -> BTreeMap<String, f64> {
        let schema = param_schema(&self.expr);
        let mut out: BTreeMap<String, f64> = schema
            .params
            .iter()
            .zip(self.params.natural(&schema))
            .map(|(p, v)| (p.label(), v))
            .collect();
        out.insert("noise.variance".into(), self.params.noise_variance());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub n_restarts: usize,
    pub max_iter: usize,
    pub f_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { n_restarts: 10, max_iter: 200, f_tol: 1e-7 }
    }
}

/// SplitMix64 step; derives independent seeds for restarts and candidates.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Log-uniform draws for positive parameters, uniform for the LIN offset,
/// and a log-uniform noise variance in [`INIT_NOISE_RANGE`].
pub fn random_init(expr: &KernelExpr, seed: u64) -> ParamVector {
    let schema = param_schema(expr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = schema.params.iter().map(|p| rng.random_range(p.lower..=p.upper)).collect();
    v.push(rng.random_range(INIT_NOISE_RANGE.0.ln()..=INIT_NOISE_RANGE.1.ln()));
    ParamVector(v)
}

fn optimize_from(
    expr: &KernelExpr,
    schema: &ParamSchema,
    x: &[f64],
    y: &[f64],
    start: ParamVector,
    options: &FitOptions,
) -> Result<(ParamVector, f64, usize, bool), String> {
    let bounds = schema.bounds();
    let opt = BoxLbfgs { max_iter: options.max_iter, f_tol: options.f_tol, ..BoxLbfgs::default() };
    let objective = |theta: &[f64]| {
        nll_and_gradient(expr, &ParamVector(theta.to_vec()), x, y).ok()
    };
    let m = opt.minimize(objective, start.values(), &bounds).map_err(|e| e.to_string())?;
    Ok((ParamVector(m.x), -m.f, m.iterations, m.converged))
}

/// Fits `expr` to the training slice of `dataset`.
pub fn fit(
    expr: &KernelExpr,
    dataset: &Dataset,
    n_restarts: usize,
    suggestion: Option<&InitSuggestion>,
    seed: u64,
) -> Result<FittedModel, FitError> {
    let options = FitOptions { n_restarts, ..FitOptions::default() };
    fit_xy(expr, &dataset.train_x(), &dataset.train_y(), &options, suggestion, seed)
}

/// Fits `expr` to explicit data. Stage 1 runs `n_restarts` random starts;
/// stage 2 overwrites the suggested coordinates of the stage-1 best and
/// re-optimizes, replacing it only if the likelihood does not decrease.
pub fn fit_xy(
    expr: &KernelExpr,
    x: &[f64],
    y: &[f64],
    options: &FitOptions,
    suggestion: Option<&InitSuggestion>,
    seed: u64,
) -> Result<FittedModel, FitError> {
    let expr = expr.canonicalize();
    let schema = param_schema(&expr);
    let n_restarts = options.n_restarts.max(1);

    let stage1: Vec<(RunDiagnostics, Option<ParamVector>)> = (0..n_restarts)
        .into_par_iter()
        .map(|i| {
            let run_seed = derive_seed(seed, i as u64);
            let start = random_init(&expr, run_seed);
            match optimize_from(&expr, &schema, x, y, start, options) {
                Ok((p, ll, iterations, converged)) => (
                    RunDiagnostics { stage: 1, seed: run_seed, loglik: Some(ll), iterations, converged, error: None },
                    Some(p),
                ),
                Err(e) => (
                    RunDiagnostics { stage: 1, seed: run_seed, loglik: None, iterations: 0, converged: false, error: Some(e) },
                    None,
                ),
            }
        })
        .collect();

    let mut runs: Vec<RunDiagnostics> = Vec::new();
    let mut best: Option<(ParamVector, f64, bool)> = None;
    for (diag, params) in stage1 {
        if let (Some(p), Some(ll)) = (params, diag.loglik) {
            if best.as_ref().is_none_or(|b| ll > b.1) {
                best = Some((p, ll, diag.converged));
            }
        }
        runs.push(diag);
    }
    let stage1_best = best.as_ref().map(|b| b.1).unwrap_or(f64::NEG_INFINITY);

    let mut from_stage2 = false;
    let coords = suggestion.map(|s| s.coordinates(&schema)).unwrap_or_default();
    if !coords.is_empty() {
        let mut start = match &best {
            Some((p, _, _)) => p.clone(),
            None => random_init(&expr, derive_seed(seed, u64::MAX)),
        };
        for (i, v) in &coords {
            start.0[*i] = *v;
        }
        match optimize_from(&expr, &schema, x, y, start, options) {
            Ok((p, ll, iterations, converged)) => {
                runs.push(RunDiagnostics { stage: 2, seed, loglik: Some(ll), iterations, converged, error: None });
                if best.as_ref().is_none_or(|b| ll >= b.1) {
                    best = Some((p, ll, converged));
                    from_stage2 = true;
                }
            }
            Err(e) => runs.push(RunDiagnostics {
                stage: 2,
                seed,
                loglik: None,
                iterations: 0,
                converged: false,
                error: Some(e),
            }),
        }
    }

    let Some((params, _, converged)) = best else {
        return Err(FitError { kernel: expr.canonical_text(), runs });
    };
    // re-evaluate so the stored likelihood is exactly reproducible from params
    let train_loglik = log_marginal_likelihood(&expr, &params, x, y)
        .map_err(|_| FitError { kernel: expr.canonical_text(), runs: runs.clone() })?;
    Ok(FittedModel {
        expr,
        params,
        train_loglik,
        round_created: 0,
        provenance: String::new(),
        diagnostics: FitDiagnostics { runs, from_stage2, converged, stage1_best },
    })
}

/// Copies fitted values from `parent` leaves onto structurally matching
/// `child` leaves. Each child leaf takes the first unused parent leaf of the
/// same base kind, scanning both in canonical order.
pub fn inherit_init(parent: &FittedModel, child_expr: &KernelExpr) -> InitSuggestion {
    let parent_schema = param_schema(&parent.expr);
    let parent_natural = parent.params.natural(&parent_schema);
    let child_schema = param_schema(child_expr);
    let parent_leaves = parent.expr.canonicalize().leaves();
    let child_leaves = child_expr.canonicalize().leaves();
    let mut used = vec![false; parent_leaves.len()];
    let mut out = InitSuggestion::default();
    for (ci, kind) in child_leaves.iter().enumerate() {
        let Some(pi) = (0..parent_leaves.len()).find(|&j| !used[j] && parent_leaves[j] == *kind) else {
            continue;
        };
        used[pi] = true;
        let from = parent_schema.params.iter().zip(&parent_natural).filter(|(p, _)| p.leaf == pi);
        let to = child_schema.params.iter().filter(|p| p.leaf == ci);
        for ((_, &value), spec) in from.zip(to) {
            out.insert(spec.label(), value);
        }
    }
    out
}
