use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::Mode;
use super::pool::{ModelPool, PoolEntry};
use super::RunError;
use crate::evaluator::EvaluatorReport;
use crate::fitting::{FitDiagnostics, FittedModel, InitSuggestion};
use crate::gp::ParamVector;
use crate::kernel::parse;
use crate::proposer::FallbackReason;
use crate::scoring::ScoreRecord;

/// Root-mean-square errors of the round's best model on the normalized
/// scale; `None` for an empty slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub round: usize,
    pub train: Option<f64>,
    pub val: Option<f64>,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSummary {
    pub model: String,
    /// `vic` in GP mode, `combined` in SR mode.
    pub score_name: String,
    pub score: f64,
    pub details: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Pooled,
    Duplicate,
    FitFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLog {
    pub kernel: String,
    pub status: CandidateStatus,
    pub parent: Option<String>,
    pub seed: u64,
    pub suggestion: Option<InitSuggestion>,
    /// Natural-unit parameters by label, noise included.
    pub params: BTreeMap<String, f64>,
    /// Optimizer-space parameter vector, enough to rebuild the model.
    pub param_vector: Vec<f64>,
    pub train_loglik: Option<f64>,
    pub n_params: usize,
    pub n_train: usize,
    pub from_stage2: bool,
    pub score: Option<ScoreRecord>,
    pub evaluator: Option<EvaluatorReport>,
    pub plots: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog<C> {
    pub round: usize,
    pub mode: Mode,
    /// Wall-clock time of writing; the only field that differs between
    /// reruns of the same configuration.
    pub timestamp: String,
    pub proposer: String,
    pub references: Vec<String>,
    pub agent_steps: usize,
    pub fallback: Option<FallbackReason>,
    pub transcript: Option<String>,
    pub candidates: Vec<C>,
    pub pool_size: usize,
    pub best: BestSummary,
    pub rmse: RmseRow,
    pub rmse_series: Vec<RmseRow>,
}

pub fn timestamp_now() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

pub fn round_log_path(out_dir: &Path, round: usize) -> PathBuf {
    out_dir.join("rounds").join(format!("r{round}")).join("log.json")
}

pub fn write_round_log<C: Serialize>(log: &RoundLog<C>, out_dir: &Path) -> Result<PathBuf, RunError> {
    let path = round_log_path(out_dir, log.round);
    let mut text = serde_json::to_string_pretty(log).map_err(|e| RunError::io(&path, e))?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| RunError::io(parent, e))?;
    }
    std::fs::write(&path, text).map_err(|e| RunError::io(&path, e))?;
    Ok(path)
}

/// Reads `rounds/r1 .. rN` in order; fails on gaps or unreadable logs.
pub fn read_round_logs<C: DeserializeOwned>(out_dir: &Path) -> Result<Vec<RoundLog<C>>, RunError> {
    let rounds_dir = out_dir.join("rounds");
    let corrupt = |path: &Path, message: String| RunError::CorruptLog { path: path.display().to_string(), message };
    let listing = std::fs::read_dir(&rounds_dir).map_err(|e| corrupt(&rounds_dir, e.to_string()))?;
    let mut numbers: Vec<usize> = listing
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_prefix('r')).and_then(|n| n.parse().ok()))
        .collect();
    numbers.sort_unstable();
    if numbers.is_empty() {
        return Err(corrupt(&rounds_dir, "no round logs".into()));
    }
    let mut logs = Vec::with_capacity(numbers.len());
    for (i, n) in numbers.iter().enumerate() {
        let path = round_log_path(out_dir, *n);
        if *n != i + 1 {
            return Err(corrupt(&path, format!("expected round {} but found round {n}", i + 1)));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| corrupt(&path, e.to_string()))?;
        let log: RoundLog<C> = serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))?;
        if log.round != *n {
            return Err(corrupt(&path, format!("log says round {} but lives in r{n}", log.round)));
        }
        logs.push(log);
    }
    Ok(logs)
}

/// Rebuilds the pool from GP round logs without refitting or evaluating.
/// With `alpha`, every score is recomputed under that weight.
pub fn replay_pool(out_dir: &Path, alpha: Option<f64>) -> Result<ModelPool, RunError> {
    let logs: Vec<RoundLog<CandidateLog>> = read_round_logs(out_dir)?;
    let mut pool = ModelPool::new();
    for log in logs {
        let path = round_log_path(out_dir, log.round);
        for c in log.candidates.into_iter().filter(|c| c.status == CandidateStatus::Pooled) {
            let corrupt = |m: String| RunError::CorruptLog { path: path.display().to_string(), message: m };
            let expr = parse(&c.kernel).map_err(|e| corrupt(format!("{}: {e}", c.kernel)))?;
            let score = c.score.ok_or_else(|| corrupt(format!("{} has no score", c.kernel)))?;
            let train_loglik = c.train_loglik.ok_or_else(|| corrupt(format!("{} has no likelihood", c.kernel)))?;
            let model = FittedModel {
                expr,
                params: ParamVector(c.param_vector),
                train_loglik,
                round_created: log.round,
                provenance: c.parent.unwrap_or_default(),
                diagnostics: FitDiagnostics::default(),
            };
            let score = match alpha {
                Some(a) => score.rescored(a),
                None => score,
            };
            pool.insert(PoolEntry { model, score, report: c.evaluator, plots: c.plots });
        }
    }
    Ok(pool)
}
