//! Prompt templates shipped under `assets/prompts/`.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
#[error("prompt asset {name}: {message}")]
pub struct ConfigError {
    pub name: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub evaluator_resemblance: String,
    pub evaluator_uncertainty: String,
    pub evaluator_generalizability: String,
    pub analyzer_system: String,
    pub analyzer_action: String,
    pub sr_system: String,
    pub sr_analyzer: String,
    pub sr_evaluator_fitness: String,
    pub sr_evaluator_generalizability: String,
}

pub const ASSET_NAMES: [&str; 9] = [
    "evaluator_resemblance",
    "evaluator_uncertainty",
    "evaluator_generalizability",
    "analyzer_system",
    "analyzer_action",
    "sr_system",
    "sr_analyzer",
    "sr_evaluator_fitness",
    "sr_evaluator_generalizability",
];

macro_rules! asset {
    ($name:literal) => {
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../assets/prompts/", $name, ".txt"))
    };
}

impl PromptSet {
    /// Templates compiled into the binary.
    pub fn embedded() -> Self {
        Self {
            evaluator_resemblance: asset!("evaluator_resemblance").into(),
            evaluator_uncertainty: asset!("evaluator_uncertainty").into(),
            evaluator_generalizability: asset!("evaluator_generalizability").into(),
            analyzer_system: asset!("analyzer_system").into(),
            analyzer_action: asset!("analyzer_action").into(),
            sr_system: asset!("sr_system").into(),
            sr_analyzer: asset!("sr_analyzer").into(),
            sr_evaluator_fitness: asset!("sr_evaluator_fitness").into(),
            sr_evaluator_generalizability: asset!("sr_evaluator_generalizability").into(),
        }
    }

    /// Loads `{name}.txt` for every asset from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, ConfigError> {
        let read = |name: &str| -> Result<String, ConfigError> {
            let path = dir.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| ConfigError { name: name.into(), message: format!("{}: {e}", path.display()) })?;
            if text.trim().is_empty() {
                return Err(ConfigError { name: name.into(), message: "empty template".into() });
            }
            Ok(text)
        };
        Ok(Self {
            evaluator_resemblance: read(ASSET_NAMES[0])?,
            evaluator_uncertainty: read(ASSET_NAMES[1])?,
            evaluator_generalizability: read(ASSET_NAMES[2])?,
            analyzer_system: read(ASSET_NAMES[3])?,
            analyzer_action: read(ASSET_NAMES[4])?,
            sr_system: read(ASSET_NAMES[5])?,
            sr_analyzer: read(ASSET_NAMES[6])?,
            sr_evaluator_fitness: read(ASSET_NAMES[7])?,
            sr_evaluator_generalizability: read(ASSET_NAMES[8])?,
        })
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::embedded()
    }
}

/// Replaces every `{key}` in `template` with its value.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in values {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}
