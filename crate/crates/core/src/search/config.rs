use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::evaluator::EvaluatorKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposerKind {
    Agent,
    Greedy,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Gp,
    Sr,
}

/// Chat endpoint settings. The API key is read from `MODEL_API_KEY` only
/// and never stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlmSettings {
    pub base_url: Option<String>,
    pub model: Option<String>,
    /// Replay recorded replies from this directory instead of calling out.
    pub fixtures_dir: Option<String>,
    /// With `fixtures_dir`, call the endpoint and record replies there.
    pub record: bool,
    pub timeout_s: f64,
    pub max_retries: u32,
}

impl Default for VlmSettings {
    fn default() -> Self {
        Self { base_url: None, model: None, fixtures_dir: None, record: false, timeout_s: 120.0, max_retries: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// CSV file with a header and two columns (x, y).
    pub data: Option<String>,
    /// Defaults to 5 in GP mode and 20 in SR mode when unset.
    pub rounds: Option<usize>,
    pub top_k: usize,
    /// Evaluator weight; defaults to 50 (GP) or 0.05 (SR) when unset.
    pub alpha: Option<f64>,
    /// Random restarts; defaults to 10 (GP) or 5 (SR) when unset.
    pub n_restarts: Option<usize>,
    pub proposer: ProposerKind,
    pub evaluator: EvaluatorKind,
    pub seed: u64,
    pub recency_gamma: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub max_steps: usize,
    pub eval_repeats: usize,
    pub greedy_limit: usize,
    pub grid_points: usize,
    /// SR complexity weight per expression node.
    pub lambda_c: f64,
    /// Scripted proposals, one list of model texts per round.
    pub script: Vec<Vec<String>>,
    pub prompts_dir: Option<String>,
    pub vlm: VlmSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Gp,
            data: None,
            rounds: None,
            top_k: 3,
            alpha: None,
            n_restarts: None,
            proposer: ProposerKind::Agent,
            evaluator: EvaluatorKind::Vlm,
            seed: 0,
            recency_gamma: 0.0,
            test_fraction: 0.2,
            val_fraction: 0.1,
            max_steps: crate::proposer::DEFAULT_MAX_STEPS,
            eval_repeats: crate::evaluator::DEFAULT_REPEATS,
            greedy_limit: crate::proposer::DEFAULT_GREEDY_LIMIT,
            grid_points: crate::plotting::DEFAULT_GRID_POINTS,
            lambda_c: 1e-3,
            script: Vec::new(),
            prompts_dir: None,
            vlm: VlmSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn effective_rounds(&self) -> usize {
        self.rounds.unwrap_or(match self.mode {
            Mode::Gp => 5,
            Mode::Sr => 20,
        })
    }

    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or(match self.mode {
            Mode::Gp => crate::scoring::DEFAULT_ALPHA,
            Mode::Sr => 0.05,
        })
    }

    pub fn effective_restarts(&self) -> usize {
        self.n_restarts.unwrap_or(match self.mode {
            Mode::Gp => 10,
            Mode::Sr => 5,
        })
    }

    /// Copy with every defaulted option made explicit, as echoed to
    /// `config.json`.
    pub fn resolved(&self) -> Self {
        Self {
            rounds: Some(self.effective_rounds()),
            alpha: Some(self.effective_alpha()),
            n_restarts: Some(self.effective_restarts()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let fail = |m: String| Err(RunError::Config(m));
        if self.effective_rounds() < 1 {
            return fail("rounds must be at least 1".into());
        }
        if self.top_k < 1 {
            return fail("top_k must be at least 1".into());
        }
        if self.effective_restarts() < 1 {
            return fail("n_restarts must be at least 1".into());
        }
        let alpha = self.effective_alpha();
        if !alpha.is_finite() || alpha < 0.0 {
            return fail(format!("alpha must be finite and non-negative, got {alpha}"));
        }
        if !self.recency_gamma.is_finite() || self.recency_gamma < 0.0 {
            return fail("recency_gamma must be finite and non-negative".into());
        }
        for (name, f) in [("test_fraction", self.test_fraction), ("val_fraction", self.val_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return fail(format!("{name} must be in [0, 1)"));
            }
        }
        if self.eval_repeats < 1 {
            return fail("eval_repeats must be at least 1".into());
        }
        if self.grid_points < 10 {
            return fail("grid_points must be at least 10".into());
        }
        if self.greedy_limit < 1 {
            return fail("greedy_limit must be at least 1".into());
        }
        if !self.lambda_c.is_finite() || self.lambda_c < 0.0 {
            return fail("lambda_c must be finite and non-negative".into());
        }
        if self.proposer == ProposerKind::Scripted && self.script.is_empty() {
            return fail("proposer \"scripted\" needs a non-empty script".into());
        }
        if self.vlm.record && self.vlm.fixtures_dir.is_none() {
            return fail("vlm.record needs vlm.fixtures_dir".into());
        }
        if !(self.vlm.timeout_s > 0.0) {
            return fail("vlm.timeout_s must be positive".into());
        }
        Ok(())
    }

    pub fn needs_client(&self) -> bool {
        self.proposer == ProposerKind::Agent || self.evaluator == EvaluatorKind::Vlm
    }
}
