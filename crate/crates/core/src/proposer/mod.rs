//! Candidate generation: the tool-using agent, the grammar-greedy baseline
//! and a scripted proposer for tests.

pub mod agent;
pub mod tools;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use agent::{
    parse_reply_with, run_loop, AgentAction, AgentContext, AgentDomain, AgentParseError, FallbackReason,
    ImageRef, LoopOutcome, DEFAULT_MAX_STEPS, MAX_CANDIDATES, MAX_STRIKES,
};
pub use tools::{tool_periodogram, tool_residual_stats, ToolError, ToolResult, TOOL_NAMES};

use crate::dataset::Dataset;
use crate::fitting::{FittedModel, InitSuggestion};
use crate::kernel::{neighbors, parse, KernelExpr};
use crate::plotting::PlotSpec;
use crate::prompts::{fill, PromptSet};
use crate::scoring::ScoreRecord;
use crate::vlm::{ChatBackend, Role, PROPOSER_TEMPERATURE};

pub const KERNEL_MARKER: &str = "next kernels:";
/// Default cap on greedy candidates per round.
pub const DEFAULT_GREEDY_LIMIT: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCandidate {
    pub expr: KernelExpr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitSuggestion>,
}

impl KernelCandidate {
    pub fn plain(expr: KernelExpr) -> Self {
        Self { expr: expr.canonicalize(), init: None }
    }
}

/// Splits `text init: a=1, b=2` into the leading text and the annotations.
/// Malformed annotation pairs are dropped with a warning.
pub fn split_init(item: &str) -> (&str, Option<InitSuggestion>) {
    let lower = item.to_ascii_lowercase();
    let Some(at) = lower.find("init:") else {
        return (item.trim(), None);
    };
    let mut init = InitSuggestion::default();
    for pair in item[at + 5..].split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match pair.split_once('=').map(|(k, v)| (k.trim(), v.trim().parse::<f64>())) {
            Some((k, Ok(v))) if v.is_finite() => init.insert(k, v),
            _ => log::warn!("ignoring malformed init annotation `{pair}`"),
        }
    }
    (item[..at].trim(), (!init.is_empty()).then_some(init))
}

pub fn parse_kernel_candidate(item: &str) -> Result<KernelCandidate, String> {
    let (text, init) = split_init(item);
    let expr = parse(text).map_err(|e| e.to_string())?;
    Ok(KernelCandidate { expr, init })
}

/// Reply classification for the kernel agent.
pub fn parse_agent_reply(reply: &str) -> Result<AgentAction<KernelCandidate>, AgentParseError> {
    parse_reply_with(reply, KERNEL_MARKER, &TOOL_NAMES, parse_kernel_candidate)
}

/// Grammar neighbors of `incumbent` in canonical order, capped at `limit`.
pub fn greedy_propose(incumbent: &KernelExpr, limit: usize) -> Vec<KernelExpr> {
    let mut out = neighbors(&incumbent.canonicalize());
    out.truncate(limit);
    out
}

/// Neighbors of several references merged round-robin (first neighbor of
/// each reference, then the second, ...), without duplicates or the
/// references themselves, capped at `limit`.
pub fn greedy_propose_many(references: &[KernelExpr], limit: usize) -> Vec<KernelExpr> {
    let lists: Vec<Vec<KernelExpr>> = references.iter().map(|r| neighbors(&r.canonicalize())).collect();
    let mut seen: HashSet<String> = references.iter().map(|r| r.canonical_text()).collect();
    let mut out = Vec::new();
    let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
    'outer: for i in 0..longest {
        for list in &lists {
            if out.len() >= limit {
                break 'outer;
            }
            if let Some(k) = list.get(i) {
                if seen.insert(k.canonical_text()) {
                    out.push(k.clone());
                }
            }
        }
    }
    out
}

/// A pool model offered to the proposer, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub model: FittedModel,
    pub score: Option<ScoreRecord>,
}

impl Reference {
    pub fn summary_line(&self, index: usize) -> String {
        let mut line = format!("[{index}] {} | train loglik {:.3}", self.model.text(), self.model.train_loglik);
        if let Some(s) = &self.score {
            line.push_str(&format!(" | BIC {:.3} | evaluator {:.1} | VIC {:.3}", s.bic, s.evaluator_total, s.vic));
        }
        let params: Vec<String> =
            self.model.describe_params().iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        line.push_str(&format!(" | {}", params.join(", ")));
        line
    }
}

#[derive(Debug, Clone)]
pub struct ProposalRequest<'a> {
    pub round: usize,
    pub references: &'a [Reference],
    pub dataset: &'a Dataset,
    /// Directory for agent plots; in-memory only when absent.
    pub plot_dir: Option<&'a Path>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub candidates: Vec<KernelCandidate>,
    pub transcript: Option<String>,
    pub steps: usize,
    pub fallback: Option<FallbackReason>,
}

impl Proposal {
    fn plain(candidates: Vec<KernelCandidate>) -> Self {
        Self { candidates, transcript: None, steps: 0, fallback: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProposerError {
    #[error("no scripted candidates for round {round}")]
    Exhausted { round: usize },
    #[error("invalid candidate: {0}")]
    Invalid(String),
    #[error("proposer produced no candidates: {0}")]
    Empty(String),
}

pub trait Proposer {
    fn propose(&mut self, request: &ProposalRequest<'_>) -> Result<Proposal, ProposerError>;
    fn label(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GreedyProposer {
    pub limit: usize,
}

impl Default for GreedyProposer {
    fn default() -> Self {
        Self { limit: DEFAULT_GREEDY_LIMIT }
    }
}

impl Proposer for GreedyProposer {
    fn propose(&mut self, request: &ProposalRequest<'_>) -> Result<Proposal, ProposerError> {
        let refs: Vec<KernelExpr> = request.references.iter().map(|r| r.model.expr.clone()).collect();
        let candidates: Vec<KernelCandidate> =
            greedy_propose_many(&refs, self.limit).into_iter().map(KernelCandidate::plain).collect();
        if candidates.is_empty() {
            return Err(ProposerError::Empty("no grammar neighbors".into()));
        }
        Ok(Proposal::plain(candidates))
    }

    fn label(&self) -> String {
        format!("greedy(limit={})", self.limit)
    }
}

/// Returns a fixed list of kernel texts per round (round 1 is index 0).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScriptedProposer {
    pub rounds: Vec<Vec<String>>,
}

impl ScriptedProposer {
    pub fn new(rounds: Vec<Vec<String>>) -> Self {
        Self { rounds }
    }
}

impl Proposer for ScriptedProposer {
    fn propose(&mut self, request: &ProposalRequest<'_>) -> Result<Proposal, ProposerError> {
        let items = request
            .round
            .checked_sub(1)
            .and_then(|i| self.rounds.get(i))
            .ok_or(ProposerError::Exhausted { round: request.round })?;
        let candidates = items
            .iter()
            .map(|s| parse_kernel_candidate(s).map_err(|e| ProposerError::Invalid(format!("{s}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if candidates.is_empty() {
            return Err(ProposerError::Empty(format!("round {} script is empty", request.round)));
        }
        Ok(Proposal::plain(candidates))
    }

    fn label(&self) -> String {
        "scripted".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSettings {
    pub prompts: PromptSet,
    pub max_steps: usize,
    pub greedy_limit: usize,
    pub temperature: f64,
    pub round: usize,
    pub plot_dir: Option<PathBuf>,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            prompts: PromptSet::embedded(),
            max_steps: DEFAULT_MAX_STEPS,
            greedy_limit: DEFAULT_GREEDY_LIMIT,
            temperature: PROPOSER_TEMPERATURE,
            round: 1,
            plot_dir: None,
        }
    }
}

/// Tool execution and fallback for the kernel agent.
pub struct GpAgentDomain<'a> {
    pub references: &'a [Reference],
    pub dataset: &'a Dataset,
    pub round: usize,
    pub plot_dir: Option<PathBuf>,
    pub greedy_limit: usize,
    calls: usize,
}

impl<'a> GpAgentDomain<'a> {
    pub fn new(references: &'a [Reference], dataset: &'a Dataset, settings: &AgentSettings) -> Self {
        Self {
            references,
            dataset,
            round: settings.round,
            plot_dir: settings.plot_dir.clone(),
            greedy_limit: settings.greedy_limit,
            calls: 0,
        }
    }

    fn model(&self, args: &BTreeMap<String, String>) -> Result<&'a FittedModel, ToolError> {
        let idx = match args.get("model") {
            Some(v) => v.parse::<usize>().map_err(|_| ToolError(format!("model index `{v}` is not a number")))?,
            None => 0,
        };
        self.references
            .get(idx)
            .map(|r| &r.model)
            .ok_or_else(|| ToolError(format!("model index {idx} out of range (0..{})", self.references.len())))
    }
}

pub(crate) fn data_plot_spec(name: &str, dataset: &Dataset) -> PlotSpec {
    PlotSpec::data(name, &dataset.train_x(), &dataset.train_y())
}

impl AgentDomain for GpAgentDomain<'_> {
    type Candidate = KernelCandidate;

    fn marker(&self) -> &'static str {
        KERNEL_MARKER
    }

    fn tool_names(&self) -> &[&'static str] {
        &TOOL_NAMES
    }

    fn parse_candidate(&self, item: &str) -> Result<KernelCandidate, String> {
        parse_kernel_candidate(item)
    }

    fn run_tool(&mut self, tool: &str, args: &BTreeMap<String, String>) -> Result<ToolResult, ToolError> {
        self.calls += 1;
        let name = format!("{}_agent{}_{tool}", self.round, self.calls);
        let dir = self.plot_dir.as_deref();
        match tool {
            "render_data_plot" => {
                let plot = tools::render_plot(&data_plot_spec(&name, self.dataset), dir)?;
                let mut r = ToolResult::new(format!("data plot of {} training points", self.dataset.train_idx.len()));
                r.plots.push(plot);
                Ok(r)
            }
            "render_prediction_plot" => {
                let model = self.model(args)?;
                let plot = tools::prediction_plot(model, self.dataset, &name, dir)?;
                let mut r = ToolResult::new(format!("prediction plot of {}", model.text()));
                r.plots.push(plot);
                Ok(r)
            }
            "residual_stats" => {
                let (x, r) = tools::gp_residuals(self.model(args)?, self.dataset)?;
                tools::residual_stats(&x, &r, &name, dir)
            }
            "periodogram" => {
                let (x, series) = match args.get("source").map(String::as_str).unwrap_or("data") {
                    "data" => (self.dataset.train_x(), self.dataset.train_y()),
                    "residuals" => tools::gp_residuals(self.model(args)?, self.dataset)?,
                    other => return Err(ToolError(format!("unknown source `{other}`; use data or residuals"))),
                };
                tools::periodogram_tool(&series, &x, &name, dir)
            }
            "describe_params" => Ok(ToolResult::new(tools::describe_params_text(self.model(args)?))),
            other => Err(ToolError(format!("unknown tool `{other}`"))),
        }
    }

    fn fallback(&self) -> Vec<KernelCandidate> {
        let incumbent = self.references.first().map(|r| r.model.expr.clone()).unwrap_or_else(|| KernelExpr::leaf(crate::kernel::BaseKernel::Wn));
        greedy_propose(&incumbent, self.greedy_limit).into_iter().map(KernelCandidate::plain).collect()
    }
}

/// Seeds the context with the system prompt, the action prompt listing the
/// references, the best-model summary and the data plot.
pub fn initial_context(
    system: &str,
    action_template: &str,
    references: &[Reference],
    data_plot: ImageRef,
    max_steps: usize,
) -> AgentContext {
    let lines: Vec<String> = references.iter().enumerate().map(|(i, r)| r.summary_line(i)).collect();
    let refs = if lines.is_empty() { "(none yet)".to_string() } else { lines.join("\n") };
    let mut ctx = AgentContext::new(max_steps);
    ctx.push(Role::System, system.trim_end(), Vec::new());
    let best = references.first().map(|r| r.model.text()).unwrap_or_else(|| "none".into());
    let text = format!(
        "{}\n\nCurrent best model: {best}. The attached image is the training data.",
        fill(action_template, &[("references", &refs)]).trim_end()
    );
    ctx.push(Role::User, text, vec![data_plot]);
    ctx
}

/// Runs the kernel agent. With `max_steps == 0` the greedy fallback is
/// returned without contacting the client.
pub fn run_agent_loop(
    client: &dyn ChatBackend,
    references: &[Reference],
    dataset: &Dataset,
    settings: &AgentSettings,
) -> Result<LoopOutcome<KernelCandidate>, ToolError> {
    let mut domain = GpAgentDomain::new(references, dataset, settings);
    let name = format!("{}_agent0_data", settings.round);
    let plot = tools::render_plot(&data_plot_spec(&name, dataset), settings.plot_dir.as_deref())?;
    let image = ImageRef { name: plot.file_name(), bytes: plot.image_bytes };
    let ctx = initial_context(
        &settings.prompts.analyzer_system,
        &settings.prompts.analyzer_action,
        references,
        image,
        settings.max_steps,
    );
    Ok(run_loop(client, &mut domain, ctx, settings.temperature))
}

pub struct AgentProposer {
    pub client: Arc<dyn ChatBackend>,
    pub settings: AgentSettings,
}

impl Proposer for AgentProposer {
    fn propose(&mut self, request: &ProposalRequest<'_>) -> Result<Proposal, ProposerError> {
        let settings = AgentSettings {
            round: request.round,
            plot_dir: request.plot_dir.map(Path::to_path_buf),
            ..self.settings.clone()
        };
        let outcome = run_agent_loop(self.client.as_ref(), request.references, request.dataset, &settings)
            .map_err(|e| ProposerError::Empty(e.to_string()))?;
        if outcome.candidates.is_empty() {
            return Err(ProposerError::Empty(format!("agent and fallback both empty ({:?})", outcome.fallback)));
        }
        Ok(Proposal {
            candidates: outcome.candidates,
            transcript: Some(outcome.context.transcript()),
            steps: outcome.steps,
            fallback: outcome.fallback,
        })
    }

    fn label(&self) -> String {
        format!("agent({})", self.client.label())
    }
}
