//! Round orchestration: propose, fit, evaluate, pool, select, log.

pub mod config;
pub mod runlog;
pub mod pool;
pub mod report;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{Mode, ProposerKind, RunConfig, VlmSettings};
pub use runlog::{
    read_round_logs, replay_pool, round_log_path, write_round_log, BestSummary, CandidateLog, CandidateStatus,
    RmseRow, RoundLog,
};
pub use pool::{select_best, ModelPool, PoolEntry};
pub use report::{build_report, write_report};

use crate::dataset::{load_csv, standardize_and_split, Dataset, DatasetError};
use crate::evaluator::{evaluate_view, EvaluatorBackend, EvaluatorKind, ModelFamily, PredictiveView};
use crate::fitting::{derive_seed, fit_xy, inherit_init, FitOptions, FittedModel, InitSuggestion};
use crate::gp::posterior_predict;
use crate::kernel::{neighbors, param_schema, BaseKernel, KernelExpr};
use crate::prompts::PromptSet;
use crate::proposer::{
    AgentProposer, AgentSettings, GreedyProposer, KernelCandidate, ProposalRequest, Proposer, ProposerError,
    Reference, ScriptedProposer,
};
use crate::scoring::{bic, ScoreRecord};
use crate::vlm::{
    ChatBackend, FixtureClient, HttpClient, ModelEndpoint, RecordingClient, Secret, VlmError, PROPOSER_TEMPERATURE,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("proposer failed in round {round}: {source}")]
    Proposer { round: usize, source: ProposerError },
    #[error("chat client: {0}")]
    Client(#[from] VlmError),
    #[error("I/O error at {path}: {message}")]
    Io { path: String, message: String },
    #[error("corrupt run log {path}: {message}")]
    CorruptLog { path: String, message: String },
    #[error("no candidate could be fitted; the pool is empty")]
    EmptyPool,
}

impl RunError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        RunError::Io { path: path.display().to_string(), message: e.to_string() }
    }
}

/// First 12 hex digits of the SHA-256 of a model's canonical text.
pub fn model_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..6])
}

/// Fitting seed of one candidate, independent of proposal order.
pub fn candidate_seed(seed: u64, round: usize, text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    derive_seed(seed, u64::from_le_bytes(word) ^ round as u64)
}

pub fn load_dataset(config: &RunConfig) -> Result<Dataset, RunError> {
    let path = config.data.as_ref().ok_or_else(|| RunError::Config("no data file given".into()))?;
    let raw = load_csv(path)?;
    Ok(standardize_and_split(&raw, config.test_fraction, config.val_fraction)?)
}

pub fn load_prompts(config: &RunConfig) -> Result<PromptSet, RunError> {
    match &config.prompts_dir {
        Some(dir) => PromptSet::from_dir(Path::new(dir)).map_err(|e| RunError::Config(e.to_string())),
        None => Ok(PromptSet::embedded()),
    }
}

/// Fixture replay, recording or live HTTP, per the settings. The key comes
/// from `MODEL_API_KEY`; endpoint and model from `MODEL_BASE_URL` and
/// `MODEL_NAME` unless overridden.
pub fn build_client(settings: &VlmSettings) -> Result<Arc<dyn ChatBackend>, RunError> {
    if let (Some(dir), false) = (&settings.fixtures_dir, settings.record) {
        return Ok(Arc::new(FixtureClient::new(dir)));
    }
    let mut endpoint = match (ModelEndpoint::from_env(), &settings.base_url) {
        (Ok(e), _) => e,
        // A keyless endpoint is acceptable only when its URL is given explicitly.
        (Err(_), Some(url)) => ModelEndpoint::new(url.clone(), "default", Secret::default()),
        (Err(e), None) => return Err(RunError::Config(e.to_string())),
    };
    if let Some(url) = &settings.base_url {
        endpoint.base_url = url.clone();
    }
    if let Some(model) = &settings.model {
        endpoint.model_name = model.clone();
    }
    endpoint.timeout_s = settings.timeout_s;
    endpoint.max_retries = settings.max_retries;
    let http = HttpClient::new(endpoint)?;
    Ok(match &settings.fixtures_dir {
        Some(dir) => Arc::new(RecordingClient::new(http, dir)),
        None => Arc::new(http),
    })
}

pub fn build_evaluator(config: &RunConfig, client: Option<Arc<dyn ChatBackend>>, prompts: &PromptSet) -> Result<EvaluatorBackend, RunError> {
    match config.evaluator {
        EvaluatorKind::Heuristic => Ok(EvaluatorBackend::Heuristic),
        EvaluatorKind::Vlm => {
            let client = client.ok_or_else(|| RunError::Config("vlm evaluator needs a chat client".into()))?;
            Ok(EvaluatorBackend::vlm(client, prompts.clone()))
        }
    }
}

pub fn build_proposer(
    config: &RunConfig,
    client: Option<Arc<dyn ChatBackend>>,
    prompts: &PromptSet,
) -> Result<Box<dyn Proposer>, RunError> {
    Ok(match config.proposer {
        ProposerKind::Greedy => Box::new(GreedyProposer { limit: config.greedy_limit }),
        ProposerKind::Scripted => Box::new(ScriptedProposer::new(config.script.clone())),
        ProposerKind::Agent => Box::new(AgentProposer {
            client: client.ok_or_else(|| RunError::Config("agent proposer needs a chat client".into()))?,
            settings: AgentSettings {
                prompts: prompts.clone(),
                max_steps: config.max_steps,
                greedy_limit: config.greedy_limit,
                temperature: PROPOSER_TEMPERATURE,
                round: 1,
                plot_dir: None,
            },
        }),
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best: FittedModel,
    pub score: ScoreRecord,
    pub pool: ModelPool,
    pub rmse_series: Vec<RmseRow>,
}

fn rmse(pred: &[f64], truth: &[f64]) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let s: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    Some((s / truth.len() as f64).sqrt())
}

/// Train / validation / test RMSE of the posterior mean conditioned on the
/// training slice.
pub fn gp_rmse(model: &FittedModel, dataset: &Dataset, round: usize) -> RmseRow {
    let (tx, ty) = (dataset.train_x(), dataset.train_y());
    let slice = |x: Vec<f64>, y: Vec<f64>| {
        if x.is_empty() {
            return None;
        }
        posterior_predict(&model.expr, &model.params, &tx, &ty, &x).ok().and_then(|p| rmse(&p.mean, &y))
    };
    RmseRow {
        round,
        train: slice(tx.clone(), ty.clone()),
        val: slice(dataset.val_x(), dataset.val_y()),
        test: slice(dataset.test_x(), dataset.test_y()),
    }
}

pub(crate) fn write_config(config: &RunConfig, out_dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(out_dir).map_err(|e| RunError::io(out_dir, e))?;
    let path = out_dir.join("config.json");
    let mut text = serde_json::to_string_pretty(&config.resolved()).map_err(|e| RunError::io(&path, e))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| RunError::io(&path, e))
}

pub(crate) fn write_transcript(out_dir: &Path, round: usize, text: &str) -> Result<String, RunError> {
    let dir = out_dir.join("transcripts");
    std::fs::create_dir_all(&dir).map_err(|e| RunError::io(&dir, e))?;
    let name = format!("r{round}.txt");
    std::fs::write(dir.join(&name), text).map_err(|e| RunError::io(&dir, e))?;
    Ok(format!("transcripts/{name}"))
}

/// The reference a candidate most plausibly derives from: the first whose
/// grammar neighbors contain it, else the incumbent.
fn parent_of<'a>(candidate: &KernelExpr, references: &'a [Reference]) -> Option<&'a FittedModel> {
    references
        .iter()
        .find(|r| neighbors(&r.model.expr).contains(candidate))
        .or(references.first())
        .map(|r| &r.model)
}

/// Fitted white-noise model used as the round-1 reference.
pub fn bootstrap_reference(dataset: &Dataset, config: &RunConfig) -> Result<Reference, RunError> {
    let options = FitOptions { n_restarts: config.effective_restarts(), ..FitOptions::default() };
    let mut model = fit_xy(
        &KernelExpr::leaf(BaseKernel::Wn),
        &dataset.train_x(),
        &dataset.train_y(),
        &options,
        None,
        derive_seed(config.seed, 0xB007),
    )
    .map_err(|e| RunError::Config(format!("bootstrap fit failed: {e}")))?;
    model.provenance = "bootstrap".into();
    Ok(Reference { model, score: None })
}

struct FitJob {
    candidate: KernelCandidate,
    text: String,
    parent: Option<String>,
    seed: u64,
    suggestion: Option<InitSuggestion>,
    /// Position of this candidate in the round's proposal order.
    slot: usize,
}

/// Runs `rounds` rounds of propose, fit, evaluate and select, writing
/// `config.json`, `rounds/r{i}/log.json`, plots, transcripts and
/// `report.md` under `out_dir`.
pub fn run_discovery(
    config: &RunConfig,
    dataset: &Dataset,
    out_dir: &Path,
    proposer: &mut dyn Proposer,
    evaluator: &EvaluatorBackend,
) -> Result<RunOutcome, RunError> {
    config.validate()?;
    write_config(config, out_dir)?;
    let plot_dir = out_dir.join("plots");
    let alpha = config.effective_alpha();
    let gamma = config.recency_gamma;
    let options = FitOptions { n_restarts: config.effective_restarts(), ..FitOptions::default() };
    let (train_x, train_y) = (dataset.train_x(), dataset.train_y());
    let n_train = train_x.len();

    let bootstrap = bootstrap_reference(dataset, config)?;
    let mut pool = ModelPool::new();
    let mut series: Vec<RmseRow> = Vec::new();

    for round in 1..=config.effective_rounds() {
        let references: Vec<Reference> = if pool.is_empty() {
            vec![bootstrap.clone()]
        } else {
            pool.top_k(config.top_k, gamma, round)
                .into_iter()
                .map(|e| Reference { model: e.model.clone(), score: Some(e.score.clone()) })
                .collect()
        };
        let request = ProposalRequest { round, references: &references, dataset, plot_dir: Some(&plot_dir) };
        let proposal = proposer.propose(&request).map_err(|source| RunError::Proposer { round, source })?;
        let transcript = match &proposal.transcript {
            Some(t) => Some(write_transcript(out_dir, round, t)?),
            None => None,
        };

        let mut logs: Vec<Option<CandidateLog>> = Vec::new();
        let mut jobs: Vec<FitJob> = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for candidate in proposal.candidates {
            let text = candidate.expr.canonical_text();
            if pool.contains(&text) || !seen.insert(text.clone()) {
                logs.push(Some(CandidateLog {
                    kernel: text,
                    status: CandidateStatus::Duplicate,
                    parent: None,
                    seed: 0,
                    suggestion: None,
                    params: BTreeMap::new(),
                    param_vector: Vec::new(),
                    train_loglik: None,
                    n_params: 0,
                    n_train,
                    from_stage2: false,
                    score: None,
                    evaluator: None,
                    plots: Vec::new(),
                    error: None,
                }));
                continue;
            }
            let parent = parent_of(&candidate.expr, &references);
            let schema = param_schema(&candidate.expr);
            let mut suggestion = parent.map(|p| inherit_init(p, &candidate.expr)).unwrap_or_default();
            if let Some(agent_init) = &candidate.init {
                suggestion = suggestion.merged_with(agent_init);
            }
            let suggestion = suggestion.validated(&schema);
            jobs.push(FitJob {
                slot: logs.len(),
                seed: candidate_seed(config.seed, round, &text),
                parent: parent.map(|p| p.text()),
                suggestion: (!suggestion.is_empty()).then_some(suggestion),
                text,
                candidate,
            });
            logs.push(None);
        }

        let fitted: Vec<_> = jobs
            .par_iter()
            .map(|job| fit_xy(&job.candidate.expr, &train_x, &train_y, &options, job.suggestion.as_ref(), job.seed))
            .collect();

        for (job, result) in jobs.into_iter().zip(fitted) {
            let schema = param_schema(&job.candidate.expr);
            let mut entry = CandidateLog {
                kernel: job.text.clone(),
                status: CandidateStatus::FitFailed,
                parent: job.parent.clone(),
                seed: job.seed,
                suggestion: job.suggestion.clone(),
                params: BTreeMap::new(),
                param_vector: Vec::new(),
                train_loglik: None,
                n_params: schema.n_params(),
                n_train,
                from_stage2: false,
                score: None,
                evaluator: None,
                plots: Vec::new(),
                error: None,
            };
            let mut model = match result {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("round {round}: {e}");
                    entry.error = Some(e.to_string());
                    logs[job.slot] = Some(entry);
                    continue;
                }
            };
            model.round_created = round;
            model.provenance = match &job.parent {
                Some(p) => format!("round {round} via {} from {p}", proposer.label()),
                None => format!("round {round} via {}", proposer.label()),
            };
            let bic_value = bic(model.train_loglik, schema.n_params(), n_train);
            let stem = format!("{round}_{}", model_hash(&job.text));
            let evaluated = PredictiveView::from_gp(&model, dataset, config.grid_points).and_then(|view| {
                evaluate_view(&view, ModelFamily::Kernel, evaluator, config.eval_repeats, Some(&plot_dir), &stem)
            });
            let (score, report, plots) = match evaluated {
                Ok((report, plots)) => (
                    ScoreRecord::new(
                        bic_value,
                        report.fitness(),
                        report.generalizability,
                        alpha,
                        round,
                    ),
                    Some(report),
                    plots,
                ),
                Err(e) => {
                    log::warn!("round {round}: evaluation of {} failed: {e}", job.text);
                    entry.error = Some(e.to_string());
                    (ScoreRecord::failed(bic_value, alpha, round), None, Vec::new())
                }
            };
            entry.status = CandidateStatus::Pooled;
            entry.params = model.describe_params();
            entry.param_vector = model.params.0.clone();
            entry.train_loglik = Some(model.train_loglik);
            entry.from_stage2 = model.diagnostics.from_stage2;
            entry.score = Some(score.clone());
            entry.evaluator = report.clone();
            entry.plots = plots.clone();
            logs[job.slot] = Some(entry);
            pool.insert(PoolEntry { model, score, report, plots });
        }

        let best = pool.best(gamma, round).ok_or(RunError::EmptyPool)?;
        let rmse_row = gp_rmse(&best.model, dataset, round);
        series.push(rmse_row);
        let mut details = BTreeMap::new();
        details.insert("bic".to_string(), best.score.bic);
        details.insert("evaluator_total".to_string(), best.score.evaluator_total);
        details.insert("train_loglik".to_string(), best.model.train_loglik);
        let round_log = RoundLog {
            round,
            mode: Mode::Gp,
            timestamp: runlog::timestamp_now(),
            proposer: proposer.label(),
            references: references.iter().map(|r| r.model.text()).collect(),
            agent_steps: proposal.steps,
            fallback: proposal.fallback.clone(),
            transcript,
            candidates: logs.into_iter().flatten().collect(),
            pool_size: pool.len(),
            best: BestSummary {
                model: best.model.text(),
                score_name: "vic".into(),
                score: best.score.adjusted_vic(gamma, round),
                details,
            },
            rmse: rmse_row,
            rmse_series: series.clone(),
        };
        write_round_log(&round_log, out_dir)?;
        log::info!("round {round}: best {} (vic {:.3})", best.model.text(), best.score.vic);
    }

    let rounds = config.effective_rounds();
    let best = pool.best(gamma, rounds).ok_or(RunError::EmptyPool)?;
    let outcome = RunOutcome { best: best.model.clone(), score: best.score.clone(), pool: pool.clone(), rmse_series: series };
    write_report(out_dir)?;
    Ok(outcome)
}

/// Builds the proposer, evaluator and client the config asks for and runs
/// GP discovery.
pub fn run_configured(config: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let prompts = load_prompts(config)?;
    let client = if config.needs_client() { Some(build_client(&config.vlm)?) } else { None };
    let evaluator = build_evaluator(config, client.clone(), &prompts)?;
    let mut proposer = build_proposer(config, client, &prompts)?;
    run_discovery(config, dataset, out_dir, proposer.as_mut(), &evaluator)
}
