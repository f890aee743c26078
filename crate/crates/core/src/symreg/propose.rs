use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::expr::{parse_function, FuncExpr};
use super::fit::{FittedFunction, SrScore};
use super::FunctionView;
use crate::dataset::Dataset;
use crate::plotting::PlotSpec;
use crate::prompts::{fill, PromptSet};
use crate::proposer::tools::{self, ToolError, ToolResult, TOOL_NAMES};
use crate::proposer::{run_loop, AgentContext, AgentDomain, FallbackReason, ImageRef, LoopOutcome, ProposerError};
use crate::vlm::{ChatBackend, Role, PROPOSER_TEMPERATURE};

pub const FUNCTION_MARKER: &str = "next functions:";
/// Candidates the greedy function proposer derives from the incumbent.
pub const DEFAULT_SR_GREEDY_LIMIT: usize = 8;

/// A pooled function offered to the proposer, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct SrReference {
    pub fitted: FittedFunction,
    pub score: Option<SrScore>,
}

impl SrReference {
    /// `index, function, nmse, complexity, score`, as the prompt announces.
    pub fn summary_line(&self, index: usize) -> String {
        match &self.score {
            Some(s) => format!(
                "{index}, {}, {:.6}, {}, {:.6} | {}",
                self.fitted.text(),
                s.nmse,
                s.complexity,
                s.combined,
                self.fitted.describe_coefficients()
            ),
            None => format!("{index}, {}, -, {}, - | {}", self.fitted.text(), self.fitted.expr.node_count(), self.fitted.describe_coefficients()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SrProposalRequest<'a> {
    pub round: usize,
    pub references: &'a [SrReference],
    pub dataset: &'a Dataset,
    pub plot_dir: Option<&'a Path>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrProposal {
    pub candidates: Vec<FuncExpr>,
    pub transcript: Option<String>,
    pub steps: usize,
    pub fallback: Option<FallbackReason>,
}

pub trait FunctionProposer {
    fn propose(&mut self, request: &SrProposalRequest<'_>) -> Result<SrProposal, ProposerError>;
    fn label(&self) -> String;
}

fn add(a: FuncExpr, b: FuncExpr) -> FuncExpr {
    FuncExpr::Add(Box::new(a), Box::new(b))
}

fn mul(a: FuncExpr, b: FuncExpr) -> FuncExpr {
    FuncExpr::Mul(Box::new(a), Box::new(b))
}

fn call(f: super::expr::Func, a: FuncExpr) -> FuncExpr {
    FuncExpr::Call(f, Box::new(a))
}

/// Deterministic one-term extensions of `incumbent`: add `c*x^k` for
/// k = 1..3, `c*sin(c*x)`, `c*cos(c*x)`, `c*exp(c*x)`, `c*log(x)`, or scale
/// by `c*x`. New coefficients are numbered after the existing ones.
pub fn greedy_functions(incumbent: &FuncExpr, limit: usize) -> Vec<FuncExpr> {
    use super::expr::Func;
    let k = incumbent.n_coefficients();
    let c = |i: usize| FuncExpr::Coef(k + i);
    let x = || FuncExpr::X;
    let terms = [
        mul(c(0), x()),
        mul(c(0), FuncExpr::Pow(Box::new(x()), 2)),
        mul(c(0), FuncExpr::Pow(Box::new(x()), 3)),
        mul(c(0), call(Func::Sin, mul(c(1), x()))),
        mul(c(0), call(Func::Cos, mul(c(1), x()))),
        mul(c(0), call(Func::Exp, mul(c(1), x()))),
        mul(c(0), call(Func::Log, x())),
    ];
    let mut out: Vec<FuncExpr> = terms.into_iter().map(|t| add(incumbent.clone(), t)).collect();
    out.push(mul(incumbent.clone(), mul(c(0), x())));
    let mut seen = HashSet::new();
    out.into_iter()
        .filter_map(|e| parse_function(&e.to_string()).ok())
        .filter(|e| seen.insert(e.to_string()))
        .take(limit)
        .collect()
}

fn proposal(candidates: Vec<FuncExpr>) -> SrProposal {
    SrProposal { candidates, transcript: None, steps: 0, fallback: None }
}

/// Fixed function texts per round (round 1 is index 0).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScriptedFunctionProposer {
    pub rounds: Vec<Vec<String>>,
}

impl FunctionProposer for ScriptedFunctionProposer {
    fn propose(&mut self, request: &SrProposalRequest<'_>) -> Result<SrProposal, ProposerError> {
        let items = request
            .round
            .checked_sub(1)
            .and_then(|i| self.rounds.get(i))
            .ok_or(ProposerError::Exhausted { round: request.round })?;
        let candidates = items
            .iter()
            .map(|s| parse_function(s).map_err(|e| ProposerError::Invalid(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if candidates.is_empty() {
            return Err(ProposerError::Empty(format!("round {} script is empty", request.round)));
        }
        Ok(proposal(candidates))
    }

    fn label(&self) -> String {
        "scripted".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GreedyFunctionProposer {
    pub limit: usize,
}

impl FunctionProposer for GreedyFunctionProposer {
    fn propose(&mut self, request: &SrProposalRequest<'_>) -> Result<SrProposal, ProposerError> {
        let incumbent = request.references.first().map(|r| r.fitted.expr.clone()).unwrap_or(FuncExpr::Coef(0));
        let candidates = greedy_functions(&incumbent, self.limit);
        if candidates.is_empty() {
            return Err(ProposerError::Empty("no greedy extension".into()));
        }
        Ok(proposal(candidates))
    }

    fn label(&self) -> String {
        "greedy".into()
    }
}

/// Tool execution and fallback for the function agent.
pub struct SrAgentDomain<'a> {
    pub references: &'a [SrReference],
    pub dataset: &'a Dataset,
    pub round: usize,
    pub plot_dir: Option<PathBuf>,
    pub greedy_limit: usize,
    pub grid_points: usize,
    calls: usize,
}

impl<'a> SrAgentDomain<'a> {
    pub fn new(references: &'a [SrReference], dataset: &'a Dataset, round: usize, plot_dir: Option<PathBuf>) -> Self {
        Self {
            references,
            dataset,
            round,
            plot_dir,
            greedy_limit: DEFAULT_SR_GREEDY_LIMIT,
            grid_points: crate::plotting::DEFAULT_GRID_POINTS,
            calls: 0,
        }
    }

    fn reference(&self, args: &BTreeMap<String, String>) -> Result<&'a FittedFunction, ToolError> {
        let idx = match args.get("model") {
            Some(v) => v.parse::<usize>().map_err(|_| ToolError(format!("model index `{v}` is not a number")))?,
            None => 0,
        };
        self.references
            .get(idx)
            .map(|r| &r.fitted)
            .ok_or_else(|| ToolError(format!("model index {idx} out of range (0..{})", self.references.len())))
    }

    fn residuals(&self, f: &FittedFunction) -> (Vec<f64>, Vec<f64>) {
        let (x, y) = self.dataset.train_raw();
        let r = y.iter().zip(f.predict(&x)).map(|(a, b)| a - b).collect();
        (x, r)
    }
}

pub(crate) fn raw_data_spec(name: &str, dataset: &Dataset) -> PlotSpec {
    let (x, y) = dataset.train_raw();
    PlotSpec::data(name, &x, &y)
}

impl AgentDomain for SrAgentDomain<'_> {
    type Candidate = FuncExpr;

    fn marker(&self) -> &'static str {
        FUNCTION_MARKER
    }

    fn tool_names(&self) -> &[&'static str] {
        &TOOL_NAMES
    }

    fn parse_candidate(&self, item: &str) -> Result<FuncExpr, String> {
        parse_function(item).map_err(|e| e.to_string())
    }

    fn run_tool(&mut self, tool: &str, args: &BTreeMap<String, String>) -> Result<ToolResult, ToolError> {
        self.calls += 1;
        let name = format!("{}_agent{}_{tool}", self.round, self.calls);
        let dir = self.plot_dir.as_deref();
        match tool {
            "render_data_plot" => {
                let plot = tools::render_plot(&raw_data_spec(&name, self.dataset), dir)?;
                let mut r = ToolResult::new(format!("data plot of {} training points", self.dataset.train_idx.len()));
                r.plots.push(plot);
                Ok(r)
            }
            "render_prediction_plot" => {
                let f = self.reference(args)?;
                let view = FunctionView::new(f, self.dataset, self.grid_points).map_err(|e| ToolError(e.to_string()))?;
                let plot = tools::render_plot(&view.view.plot_specs(&name).prediction, dir)?;
                let mut r = ToolResult::new(format!("fitted function {} over the data", f.text()));
                r.plots.push(plot);
                Ok(r)
            }
            "residual_stats" => {
                let (x, r) = self.residuals(self.reference(args)?);
                tools::residual_stats(&x, &r, &name, dir)
            }
            "periodogram" => {
                let (x, series) = match args.get("source").map(String::as_str).unwrap_or("data") {
                    "data" => self.dataset.train_raw(),
                    "residuals" => self.residuals(self.reference(args)?),
                    other => return Err(ToolError(format!("unknown source `{other}`; use data or residuals"))),
                };
                tools::periodogram_tool(&series, &x, &name, dir)
            }
            "describe_params" => {
                let f = self.reference(args)?;
                Ok(ToolResult::new(format!("{}: {}", f.text(), f.describe_coefficients())))
            }
            other => Err(ToolError(format!("unknown tool `{other}`"))),
        }
    }

    fn fallback(&self) -> Vec<FuncExpr> {
        let incumbent = self.references.first().map(|r| r.fitted.expr.clone()).unwrap_or(FuncExpr::Coef(0));
        greedy_functions(&incumbent, self.greedy_limit)
    }
}

/// Agent-driven function proposals.
pub struct AgentFunctionProposer {
    pub client: Arc<dyn ChatBackend>,
    pub prompts: PromptSet,
    pub max_steps: usize,
    pub greedy_limit: usize,
}

/// Seeds the context with the function-analyst prompts and the data plot,
/// then runs the shared action loop.
pub fn run_sr_agent_loop(
    client: &dyn ChatBackend,
    request: &SrProposalRequest<'_>,
    prompts: &PromptSet,
    max_steps: usize,
    greedy_limit: usize,
) -> Result<LoopOutcome<FuncExpr>, ToolError> {
    let mut domain = SrAgentDomain::new(request.references, request.dataset, request.round, request.plot_dir.map(Path::to_path_buf));
    domain.greedy_limit = greedy_limit;
    let plot = tools::render_plot(&raw_data_spec(&format!("{}_agent0_data", request.round), request.dataset), request.plot_dir)?;
    let lines: Vec<String> = request.references.iter().enumerate().map(|(i, r)| r.summary_line(i)).collect();
    let refs = if lines.is_empty() { "(none yet)".to_string() } else { lines.join("\n") };
    let mut ctx = AgentContext::new(max_steps);
    ctx.push(Role::System, prompts.sr_system.trim_end(), Vec::new());
    ctx.push(
        Role::User,
        format!("{}\n\nThe attached image is the training data.", fill(&prompts.sr_analyzer, &[("references", &refs)]).trim_end()),
        vec![ImageRef { name: plot.file_name(), bytes: plot.image_bytes }],
    );
    Ok(run_loop(client, &mut domain, ctx, PROPOSER_TEMPERATURE))
}

impl FunctionProposer for AgentFunctionProposer {
    fn propose(&mut self, request: &SrProposalRequest<'_>) -> Result<SrProposal, ProposerError> {
        let outcome = run_sr_agent_loop(self.client.as_ref(), request, &self.prompts, self.max_steps, self.greedy_limit)
            .map_err(|e| ProposerError::Empty(e.to_string()))?;
        if outcome.candidates.is_empty() {
            return Err(ProposerError::Empty(format!("agent and fallback both empty ({:?})", outcome.fallback)));
        }
        Ok(SrProposal {
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
