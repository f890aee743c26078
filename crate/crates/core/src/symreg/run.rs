use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::expr::FuncExpr;
use super::fit::{fit_function_xy, mean_predictor, sr_objective_xy, FittedFunction, SrFitOptions, SrScore};
use super::propose::{
    AgentFunctionProposer, FunctionProposer, GreedyFunctionProposer, ScriptedFunctionProposer, SrProposalRequest,
    SrReference,
};
use super::FunctionView;
use crate::dataset::Dataset;
use crate::evaluator::{evaluate_view, EvaluatorBackend, EvaluatorReport, ModelFamily};
use crate::search::{
    build_client, build_evaluator, candidate_seed, load_prompts, model_hash, runlog, write_report, BestSummary,
    CandidateStatus, Mode, ProposerKind, RmseRow, RoundLog, RunConfig, RunError,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SrEntry {
    pub fitted: FittedFunction,
    pub score: SrScore,
    pub report: Option<EvaluatorReport>,
    pub plots: Vec<String>,
}

/// Every scored function keyed by template text, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SrPool {
    entries: IndexMap<String, SrEntry>,
}

fn rank(a: (&String, &SrEntry), b: (&String, &SrEntry), gamma: f64, round: usize) -> Ordering {
    b.1.score
        .adjusted(gamma, round)
        .total_cmp(&a.1.score.adjusted(gamma, round))
        .then_with(|| b.1.score.round_index.cmp(&a.1.score.round_index))
        .then_with(|| a.0.cmp(b.0))
}

impl SrPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, text: &str) -> bool {
        self.entries.contains_key(text)
    }

    pub fn get(&self, text: &str) -> Option<&SrEntry> {
        self.entries.get(text)
    }

    pub fn insert(&mut self, entry: SrEntry) -> bool {
        let key = entry.fitted.text();
        if self.entries.contains_key(&key) {
            return false;
        }
        self.entries.insert(key, entry);
        true
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &SrEntry)> {
        self.entries.iter()
    }

    /// The `k` best finite entries, best first.
    pub fn top_k(&self, k: usize, gamma: f64, round: usize) -> Vec<&SrEntry> {
        let mut all: Vec<_> = self.entries.iter().filter(|(_, e)| e.score.finite).collect();
        all.sort_by(|a, b| rank(*a, *b, gamma, round));
        all.into_iter().take(k).map(|(_, e)| e).collect()
    }

    /// Best finite entry; non-finite functions are never selected.
    pub fn best(&self, gamma: f64, round: usize) -> Option<&SrEntry> {
        self.entries.iter().filter(|(_, e)| e.score.finite).min_by(|a, b| rank(*a, *b, gamma, round)).map(|(_, e)| e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrCandidateLog {
    pub function: String,
    pub status: CandidateStatus,
    pub seed: u64,
    pub coefficients: Vec<f64>,
    pub rss: Option<f64>,
    pub n_coefficients: usize,
    pub score: Option<SrScore>,
    pub evaluator: Option<EvaluatorReport>,
    pub plots: Vec<String>,
    pub error: Option<String>,
}

impl SrCandidateLog {
    fn new(function: String, status: CandidateStatus) -> Self {
        Self {
            function,
            status,
            seed: 0,
            coefficients: Vec::new(),
            rss: None,
            n_coefficients: 0,
            score: None,
            evaluator: None,
            plots: Vec::new(),
            error: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SrOutcome {
    pub best: FittedFunction,
    pub score: SrScore,
    pub pool: SrPool,
    pub rmse_series: Vec<RmseRow>,
}

/// RMSE of the function on each slice, with predictions mapped to the
/// normalized y scale.
fn function_rmse(f: &FittedFunction, dataset: &Dataset, round: usize) -> RmseRow {
    let raw = dataset.raw();
    let slice = |idx: &[usize]| -> Option<f64> {
        if idx.is_empty() {
            return None;
        }
        let s: f64 = idx
            .iter()
            .map(|&i| {
                let p = dataset.y_transform.invert(f.expr.eval(raw.x[i], &f.coefficients));
                (p - dataset.y_norm[i]).powi(2)
            })
            .sum();
        Some((s / idx.len() as f64).sqrt())
    };
    RmseRow {
        round,
        train: slice(&dataset.train_idx),
        val: slice(&dataset.val_idx),
        test: slice(&dataset.test_idx),
    }
}

/// The discovery loop over function templates. Artifacts match the GP run
/// layout; round logs carry [`SrCandidateLog`] entries and score name
/// `combined`.
pub fn run_sr_discovery(
    config: &RunConfig,
    dataset: &Dataset,
    out_dir: &Path,
    proposer: &mut dyn FunctionProposer,
    evaluator: &EvaluatorBackend,
) -> Result<SrOutcome, RunError> {
    config.validate()?;
    let mut config = config.clone();
    config.mode = Mode::Sr;
    crate::search::write_config(&config, out_dir)?;
    let plot_dir = out_dir.join("plots");
    let alpha = config.effective_alpha();
    let gamma = config.recency_gamma;
    let options = SrFitOptions { n_restarts: config.effective_restarts(), ..SrFitOptions::default() };
    let (train_x, train_y) = dataset.train_raw();
    let bootstrap = SrReference { fitted: mean_predictor(&train_y), score: None };

    let mut pool = SrPool::default();
    let mut series = Vec::new();
    for round in 1..=config.effective_rounds() {
        let references: Vec<SrReference> = {
            let top = pool.top_k(config.top_k, gamma, round);
            if top.is_empty() {
                vec![bootstrap.clone()]
            } else {
                top.into_iter().map(|e| SrReference { fitted: e.fitted.clone(), score: Some(e.score.clone()) }).collect()
            }
        };
        let request = SrProposalRequest { round, references: &references, dataset, plot_dir: Some(&plot_dir) };
        let proposal = proposer.propose(&request).map_err(|source| RunError::Proposer { round, source })?;
        let transcript = match &proposal.transcript {
            Some(t) => Some(crate::search::write_transcript(out_dir, round, t)?),
            None => None,
        };

        let mut logs: Vec<Option<SrCandidateLog>> = Vec::new();
        let mut jobs: Vec<(FuncExpr, String, u64, usize)> = Vec::new();
        let mut seen = HashSet::new();
        for expr in proposal.candidates {
            let text = expr.to_string();
            if pool.contains(&text) || !seen.insert(text.clone()) {
                logs.push(Some(SrCandidateLog::new(text, CandidateStatus::Duplicate)));
                continue;
            }
            let seed = candidate_seed(config.seed, round, &text);
            jobs.push((expr, text, seed, logs.len()));
            logs.push(None);
        }
        let fitted: Vec<_> =
            jobs.par_iter().map(|(expr, _, seed, _)| fit_function_xy(expr, &train_x, &train_y, &options, *seed)).collect();

        for ((expr, text, seed, slot), result) in jobs.into_iter().zip(fitted) {
            let mut entry = SrCandidateLog::new(text.clone(), CandidateStatus::FitFailed);
            entry.seed = seed;
            entry.n_coefficients = expr.n_coefficients();
            let mut f = match result {
                Ok(f) => f,
                Err(e) => {
                    log::warn!("round {round}: {e}");
                    entry.error = Some(e.to_string());
                    logs[slot] = Some(entry);
                    continue;
                }
            };
            f.round_created = round;
            f.provenance = format!("round {round} via {}", proposer.label());
            let view = FunctionView::new(&f, dataset, config.grid_points).map_err(|e| RunError::Config(e.to_string()))?;
            let objective = sr_objective_xy(&f, &train_x, &train_y, &view.view.grid_x, config.lambda_c)
                .map_err(|e| RunError::Config(e.to_string()))?;
            let (score, report, plots) = if !view.finite {
                entry.error = Some("non-finite values on the training inputs or the plotting grid".into());
                (objective.with_evaluation(0.0, 0.0, alpha, round), None, Vec::new())
            } else {
                let stem = format!("{round}_{}", model_hash(&text));
                match evaluate_view(&view.view, ModelFamily::Function, evaluator, config.eval_repeats, Some(&plot_dir), &stem) {
                    Ok((report, plots)) => {
                        (objective.with_evaluation(report.fitness(), report.generalizability, alpha, round), Some(report), plots)
                    }
                    Err(e) => {
                        log::warn!("round {round}: evaluation of {text} failed: {e}");
                        entry.error = Some(e.to_string());
                        let mut s = objective.with_evaluation(0.0, 0.0, alpha, round);
                        s.evaluation_failed = true;
                        (s, None, Vec::new())
                    }
                }
            };
            entry.status = CandidateStatus::Pooled;
            entry.coefficients = f.coefficients.clone();
            entry.rss = Some(f.rss);
            entry.score = Some(score.clone());
            entry.evaluator = report.clone();
            entry.plots = plots.clone();
            logs[slot] = Some(entry);
            pool.insert(SrEntry { fitted: f, score, report, plots });
        }

        let best = pool.best(gamma, round).ok_or(RunError::EmptyPool)?;
        let rmse = function_rmse(&best.fitted, dataset, round);
        series.push(rmse);
        let details = BTreeMap::from([
            ("nmse".to_string(), best.score.nmse),
            ("complexity".to_string(), best.score.complexity as f64),
            ("objective".to_string(), best.score.objective),
            ("evaluator_total".to_string(), best.score.evaluator_total),
        ]);
        let round_log = RoundLog {
            round,
            mode: Mode::Sr,
            timestamp: runlog::timestamp_now(),
            proposer: proposer.label(),
            references: references.iter().map(|r| r.fitted.text()).collect(),
            agent_steps: proposal.steps,
            fallback: proposal.fallback.clone(),
            transcript,
            candidates: logs.into_iter().flatten().collect(),
            pool_size: pool.len(),
            best: BestSummary {
                model: format!("{}  [{}]", best.fitted.text(), best.fitted.describe_coefficients()),
                score_name: "combined".into(),
                score: best.score.adjusted(gamma, round),
                details,
            },
            rmse,
            rmse_series: series.clone(),
        };
        runlog::write_round_log(&round_log, out_dir)?;
        log::info!("round {round}: best {} (combined {:.4})", best.fitted.text(), best.score.combined);
    }

    let best = pool.best(gamma, config.effective_rounds()).ok_or(RunError::EmptyPool)?;
    let outcome = SrOutcome { best: best.fitted.clone(), score: best.score.clone(), pool: pool.clone(), rmse_series: series };
    write_report(out_dir)?;
    Ok(outcome)
}

/// Builds the configured proposer and evaluator and runs SR discovery.
pub fn run_sr_configured(config: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<SrOutcome, RunError> {
    config.validate()?;
    let prompts = load_prompts(config)?;
    let client = if config.needs_client() { Some(build_client(&config.vlm)?) } else { None };
    let evaluator = build_evaluator(config, client.clone(), &prompts)?;
    let mut proposer: Box<dyn FunctionProposer> = match config.proposer {
        ProposerKind::Greedy => Box::new(GreedyFunctionProposer { limit: config.greedy_limit }),
        ProposerKind::Scripted => Box::new(ScriptedFunctionProposer { rounds: config.script.clone() }),
        ProposerKind::Agent => Box::new(AgentFunctionProposer {
            client: client.ok_or_else(|| RunError::Config("agent proposer needs a chat client".into()))?,
            prompts,
            max_steps: config.max_steps,
            greedy_limit: config.greedy_limit,
        }),
    };
    run_sr_discovery(config, dataset, out_dir, proposer.as_mut(), &evaluator)
}
