//! The multi-step proposal loop: reply classification, an append-only
//! context and budget / strike handling shared by the GP and SR agents.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tools::{ToolError, ToolResult};
use crate::vlm::{ChatBackend, ChatMessage, Role};

/// Most candidates accepted from one proposal.
pub const MAX_CANDIDATES: usize = 6;
pub const DEFAULT_MAX_STEPS: usize = 10;
/// Consecutive unparseable replies before falling back.
pub const MAX_STRIKES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum AgentAction<C> {
    Analyze(String),
    Execute { tool: String, args: BTreeMap<String, String> },
    Propose(Vec<C>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message}")]
pub struct AgentParseError {
    pub message: String,
    pub raw: String,
}

/// Splits `[a, "b", 'c']` into items, honouring quotes and parentheses.
fn split_list(body: &str) -> Result<Vec<String>, String> {
    let mut items = Vec::new();
    let mut current = String::new();
    let mut quote: Option<char> = None;
    let mut depth = 0i32;
    let mut quoted_item = false;
    for c in body.chars() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => current.push(c),
            None => match c {
                '"' | '\'' => {
                    quote = Some(c);
                    quoted_item = true;
                }
                '(' => {
                    depth += 1;
                    current.push(c);
                }
                ')' => {
                    depth -= 1;
                    current.push(c);
                }
                ',' if depth == 0 => {
                    items.push(std::mem::take(&mut current));
                    quoted_item = false;
                }
                c if quoted_item && !c.is_whitespace() => {
                    return Err(format!("unexpected `{c}` after a quoted item"));
                }
                _ => current.push(c),
            },
        }
    }
    if quote.is_some() {
        return Err("unterminated quote in list".into());
    }
    items.push(current);
    Ok(items.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
}

/// Finds `marker` (case-insensitive) and returns the text of the bracketed
/// list that follows it.
fn list_after_marker<'a>(reply: &'a str, marker: &str) -> Option<Result<&'a str, String>> {
    let lower = reply.to_ascii_lowercase();
    let at = lower.find(&marker.to_ascii_lowercase())?;
    let rest = &reply[at + marker.len()..];
    let Some(open) = rest.find('[') else {
        return Some(Err(format!("`{marker}` is not followed by a bracketed list")));
    };
    let mut quote: Option<char> = None;
    for (i, c) in rest[open + 1..].char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '"' || c == '\'' => quote = Some(c),
            None if c == ']' => return Some(Ok(&rest[open + 1..open + 1 + i])),
            None => {}
        }
    }
    Some(Err(format!("the list after `{marker}` is not closed")))
}

fn parse_tool_block(block: &str, tools: &[&str]) -> Result<(String, BTreeMap<String, String>), String> {
    let line = block.lines().map(str::trim).find(|l| !l.is_empty()).ok_or("empty tool block")?;
    let mut words = line.split_whitespace();
    let tool = words.next().unwrap_or_default().trim_end_matches("()").to_string();
    if !tools.contains(&tool.as_str()) {
        return Err(format!("unknown tool `{tool}`; available: {}", tools.join(", ")));
    }
    let mut args = BTreeMap::new();
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| format!("argument `{w}` is not key=value"))?;
        args.insert(k.to_string(), v.trim_matches(|c| c == '"' || c == '\'').to_string());
    }
    Ok((tool, args))
}

/// Classifies a reply. A fenced block tagged `tool` is an Execute, a
/// `marker` followed by a bracketed list is a Propose, anything else is an
/// Analyze. Proposals keep at most [`MAX_CANDIDATES`] items.
pub fn parse_reply_with<C>(
    reply: &str,
    marker: &str,
    tools: &[&str],
    parse_item: impl Fn(&str) -> Result<C, String>,
) -> Result<AgentAction<C>, AgentParseError> {
    let err = |message: String| AgentParseError { message, raw: reply.to_string() };
    if let Some(start) = reply.find("```tool") {
        let body_start = start + "```tool".len();
        let body = &reply[body_start..];
        let body = body.strip_prefix('s').unwrap_or(body);
        let end = body.find("```").ok_or_else(|| err("tool block is not closed".into()))?;
        let (tool, args) = parse_tool_block(&body[..end], tools).map_err(err)?;
        return Ok(AgentAction::Execute { tool, args });
    }
    if let Some(list) = list_after_marker(reply, marker) {
        let items = split_list(list.map_err(err)?).map_err(err)?;
        if items.is_empty() {
            return Err(err("the proposal list is empty".into()));
        }
        if items.len() > MAX_CANDIDATES {
            log::warn!("agent proposed {} candidates; keeping the first {MAX_CANDIDATES}", items.len());
        }
        let candidates = items
            .iter()
            .take(MAX_CANDIDATES)
            .map(|item| parse_item(item).map_err(|e| format!("candidate `{item}`: {e}")))
            .collect::<Result<Vec<C>, String>>()
            .map_err(err)?;
        return Ok(AgentAction::Propose(candidates));
    }
    Ok(AgentAction::Analyze(reply.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub name: String,
    #[serde(skip)]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub role: Role,
    pub text: String,
    pub images: Vec<ImageRef>,
}

/// Ordered, append-only transcript of one proposal loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentContext {
    entries: Vec<ContextEntry>,
    pub step_count: usize,
    pub budget: usize,
}

impl AgentContext {
    pub fn new(budget: usize) -> Self {
        Self { entries: Vec::new(), step_count: 0, budget }
    }

    pub fn push(&mut self, role: Role, text: impl Into<String>, images: Vec<ImageRef>) {
        self.entries.push(ContextEntry { role, text: text.into(), images });
    }

    pub fn entries(&self) -> &[ContextEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        self.entries
            .iter()
            .map(|e| ChatMessage::new(e.role, e.text.clone(), e.images.iter().map(|i| i.bytes.clone()).collect()))
            .collect()
    }

    /// Plain-text transcript with image references by name.
    pub fn transcript(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&format!("=== [{i}] {} ===\n{}\n", e.role.as_str(), e.text.trim_end()));
            for img in &e.images {
                out.push_str(&format!("[image: {}]\n", img.name));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum FallbackReason {
    BudgetExhausted,
    ParseFailures,
    ClientError(String),
}

#[derive(Debug, Clone)]
pub struct LoopOutcome<C> {
    pub candidates: Vec<C>,
    pub steps: usize,
    pub fallback: Option<FallbackReason>,
    pub context: AgentContext,
}

/// What differs between the kernel and the function agent.
pub trait AgentDomain {
    type Candidate;

    /// Literal that introduces a proposal list, e.g. `next kernels:`.
    fn marker(&self) -> &'static str;
    fn tool_names(&self) -> &[&'static str];
    fn parse_candidate(&self, item: &str) -> Result<Self::Candidate, String>;
    fn run_tool(&mut self, tool: &str, args: &BTreeMap<String, String>) -> Result<ToolResult, ToolError>;
    fn fallback(&self) -> Vec<Self::Candidate>;
}

fn tool_images(result: &ToolResult) -> Vec<ImageRef> {
    result
        .plots
        .iter()
        .map(|p| ImageRef { name: p.file_name(), bytes: p.image_bytes.clone() })
        .collect()
}

/// Runs the action loop from a seeded context until a proposal, the step
/// budget, [`MAX_STRIKES`] consecutive parse failures or a client error.
/// The last three end in the domain fallback.
pub fn run_loop<D: AgentDomain>(
    client: &dyn ChatBackend,
    domain: &mut D,
    mut context: AgentContext,
    temperature: f64,
) -> LoopOutcome<D::Candidate> {
    let mut strikes = 0;
    let finish = |context: AgentContext, domain: &D, reason: FallbackReason| {
        log::warn!("agent loop falls back to greedy proposals: {reason:?}");
        LoopOutcome { candidates: domain.fallback(), steps: context.step_count, fallback: Some(reason), context }
    };
    while context.step_count < context.budget {
        let reply = match client.chat(&context.messages(), temperature) {
            Ok(r) => r,
            Err(e) => return finish(context, domain, FallbackReason::ClientError(e.to_string())),
        };
        context.step_count += 1;
        context.push(Role::Assistant, reply.clone(), Vec::new());
        let tools = domain.tool_names().to_vec();
        match parse_reply_with(&reply, domain.marker(), &tools, |item| domain.parse_candidate(item)) {
            Ok(AgentAction::Propose(candidates)) => {
                return LoopOutcome { candidates, steps: context.step_count, fallback: None, context };
            }
            Ok(AgentAction::Execute { tool, args }) => {
                strikes = 0;
                match domain.run_tool(&tool, &args) {
                    Ok(result) => {
                        let images = tool_images(&result);
                        context.push(Role::User, format!("Observation from `{tool}`:\n{}", result.text), images);
                    }
                    Err(e) => context.push(Role::User, format!("Tool `{tool}` failed: {e}"), Vec::new()),
                }
            }
            Ok(AgentAction::Analyze(_)) => {
                strikes = 0;
                context.push(
                    Role::User,
                    format!(
                        "Continue. Either run one tool in a ```tool block or reply with `{}` and a list.",
                        domain.marker()
                    ),
                    Vec::new(),
                );
            }
            Err(e) => {
                strikes += 1;
                if strikes >= MAX_STRIKES {
                    return finish(context, domain, FallbackReason::ParseFailures);
                }
                context.push(Role::User, format!("Your reply could not be used: {e}. Please try again."), Vec::new());
            }
        }
    }
    finish(context, domain, FallbackReason::BudgetExhausted)
}
