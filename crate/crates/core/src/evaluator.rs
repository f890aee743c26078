//! Visual fitness and generalizability scores for a fitted model, from a
//! vision-language model or from a deterministic heuristic rubric.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::fitting::FittedModel;
use crate::gp::{posterior_predict, GpError};
use crate::plotting::{self, extrapolation_grid, Layer, PlotError, PlotSpec, DEFAULT_GRID_POINTS, GRAY, RED};
use crate::prompts::PromptSet;
use crate::vlm::{parse_score_mapping, ChatBackend, ChatMessage, VlmError, EVALUATOR_TEMPERATURE};

pub const COMPONENT_MAX: f64 = 50.0;
pub const DEFAULT_REPEATS: usize = 2;
/// Guards slope and width ratios against division by zero.
pub const EPS: f64 = 1e-8;
/// Fraction of the grid per side treated as an edge window.
pub const EDGE_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("evaluator backend failed: {0}")]
    Backend(#[from] VlmError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("prediction failed: {0}")]
    Model(#[from] GpError),
    #[error("n_repeats must be at least 1")]
    NoRepeats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    Vlm,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorReport {
    pub fitness_mean_resemblance: f64,
    pub fitness_uncertainty: f64,
    pub generalizability: f64,
    pub n_repeats: usize,
    pub backend: EvaluatorKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub raw_replies: Vec<String>,
}

impl EvaluatorReport {
    pub fn fitness(&self) -> f64 {
        self.fitness_mean_resemblance + self.fitness_uncertainty
    }

    pub fn total(&self) -> f64 {
        self.fitness() + self.generalizability
    }
}

/// Which prompt family a view is scored with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFamily {
    /// Gaussian-process kernels: three prompts, key `kernel1`.
    Kernel,
    /// Deterministic functions: no band, so the uncertainty prompt is skipped
    /// and that component is fixed at its maximum. Key `function1`.
    Function,
}

/// Everything the evaluator looks at: training data, the prediction at the
/// training inputs and the prediction over the extrapolation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveView {
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
    pub mean_at_train: Vec<f64>,
    pub grid_x: Vec<f64>,
    pub mean: Vec<f64>,
    pub low_q: Vec<f64>,
    pub high_q: Vec<f64>,
}

impl PredictiveView {
    /// GP posterior conditioned on the training slice, evaluated at the
    /// training inputs and on the ±20% grid around the full x extent.
    pub fn from_gp(model: &FittedModel, dataset: &Dataset, grid_points: usize) -> Result<Self, EvaluationError> {
        let (x, y) = (dataset.train_x(), dataset.train_y());
        let (lo, hi) = dataset.x_extent();
        let grid = extrapolation_grid(lo, hi, grid_points)?;
        let at_train = posterior_predict(&model.expr, &model.params, &x, &y, &x)?;
        let post = posterior_predict(&model.expr, &model.params, &x, &y, &grid)?;
        Ok(Self {
            train_x: x,
            train_y: y,
            mean_at_train: at_train.mean,
            grid_x: post.grid_x,
            mean: post.mean,
            low_q: post.low_q,
            high_q: post.high_q,
        })
    }

    pub fn band_width(&self) -> Vec<f64> {
        self.high_q.iter().zip(&self.low_q).map(|(h, l)| h - l).collect()
    }

    fn spec_with(&self, name: String, show_band: bool) -> PlotSpec {
        let mut layers = Vec::new();
        if show_band {
            layers.push(Layer::Band {
                x: self.grid_x.clone(),
                lower: self.low_q.clone(),
                upper: self.high_q.clone(),
                color: plotting::LIGHT_BLUE,
            });
        }
        if let (Some(a), Some(b)) = (self.train_x.first(), self.train_x.last()) {
            layers.push(Layer::VLine { x: *a, color: GRAY });
            layers.push(Layer::VLine { x: *b, color: GRAY });
        }
        layers.push(Layer::Line {
            x: self.train_x.clone(),
            y: self.train_y.clone(),
            color: plotting::BLACK,
            dashed: false,
        });
        layers.push(Layer::Line { x: self.grid_x.clone(), y: self.mean.clone(), color: RED, dashed: false });
        let mut spec = PlotSpec::data(name, &[], &[]);
        spec.kind = plotting::PlotKind::Prediction;
        spec.title = "prediction".into();
        spec.layers = layers;
        spec
    }

    /// Data-only, mean-only and full prediction plot specs named
    /// `{stem}_data`, `{stem}_mean`, `{stem}_prediction`.
    pub fn plot_specs(&self, stem: &str) -> EvalPlotSpecs {
        let mut mean_only = PlotSpec::data(format!("{stem}_mean"), &self.grid_x, &self.mean);
        mean_only.kind = plotting::PlotKind::Prediction;
        mean_only.title = "predicted mean".into();
        if let Layer::Line { color, .. } = &mut mean_only.layers[0] {
            *color = RED;
        }
        EvalPlotSpecs {
            data: PlotSpec::data(format!("{stem}_data"), &self.train_x, &self.train_y),
            mean_only,
            prediction: self.spec_with(format!("{stem}_prediction"), true),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlotSpecs {
    pub data: PlotSpec,
    pub mean_only: PlotSpec,
    pub prediction: PlotSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlots {
    pub data: Vec<u8>,
    pub mean_only: Vec<u8>,
    pub prediction: Vec<u8>,
    /// File names when the plots were written to disk.
    pub files: Vec<String>,
}

impl EvalPlotSpecs {
    pub fn render(&self, out_dir: Option<&Path>) -> Result<EvalPlots, PlotError> {
        let specs = [&self.data, &self.mean_only, &self.prediction];
        let mut bytes = Vec::with_capacity(3);
        let mut files = Vec::new();
        for spec in specs {
            match out_dir {
                Some(dir) => {
                    let r = plotting::render(spec, dir)?;
                    files.push(r.file_name());
                    bytes.push(r.image_bytes);
                }
                None => bytes.push(plotting::render_bytes(spec)?),
            }
        }
        let prediction = bytes.pop().unwrap_or_default();
        let mean_only = bytes.pop().unwrap_or_default();
        let data = bytes.pop().unwrap_or_default();
        Ok(EvalPlots { data, mean_only, prediction, files })
    }
}

#[derive(Clone)]
pub enum EvaluatorBackend {
    Heuristic,
    Vlm { client: Arc<dyn ChatBackend>, prompts: PromptSet, temperature: f64 },
}

impl EvaluatorBackend {
    pub fn vlm(client: Arc<dyn ChatBackend>, prompts: PromptSet) -> Self {
        Self::Vlm { client, prompts, temperature: EVALUATOR_TEMPERATURE }
    }

    pub fn kind(&self) -> EvaluatorKind {
        match self {
            Self::Heuristic => EvaluatorKind::Heuristic,
            Self::Vlm { .. } => EvaluatorKind::Vlm,
        }
    }
}

impl std::fmt::Debug for EvaluatorBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Heuristic => f.write_str("Heuristic"),
            Self::Vlm { client, temperature, .. } => write!(f, "Vlm({}, t={temperature})", client.label()),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    mean(&v.iter().map(|x| (x - m).powi(2)).collect::<Vec<_>>()).sqrt()
}

/// Index ranges of the left edge, centre and right edge windows.
fn windows(n: usize) -> [std::ops::Range<usize>; 3] {
    let e = ((EDGE_FRACTION * n as f64).round() as usize).clamp(2, n / 2);
    [0..e, e..n - e, n - e..n]
}

fn mean_abs_slope(x: &[f64], y: &[f64], r: std::ops::Range<usize>) -> f64 {
    let slopes: Vec<f64> = (r.start + 1..r.end)
        .filter(|&i| x[i] > x[i - 1])
        .map(|i| ((y[i] - y[i - 1]) / (x[i] - x[i - 1])).abs())
        .collect();
    mean(&slopes)
}

/// Deterministic stand-in for the visual rubric.
///
/// * resemblance `= 50 clamp(1 - RMSE(mean, y) / sd(y), 0, 1)` on the train slice;
/// * uncertainty `= 50 clamp(1 - w̄ / range(y), 0, 1) - 20 clamp(w_edge / w_center - 1, 0, 1)`,
///   clamped to `[0, 50]`, with `w` the band width on the grid;
/// * generalizability `= 50 clamp(1 - flat - blowup, 0, 1)`, where each side
///   adds `0.5 clamp(1 - |slope_edge| / (|slope_center| + ε), 0, 1)` to `flat`
///   and `blowup = 0.5 clamp(w_edge / w_center - 2, 0, 1)`.
///
/// Edge windows are the outer 20% of the grid per side; `w_edge` is the
/// larger of the two side means.
pub fn heuristic_scores(view: &PredictiveView) -> (f64, f64, f64) {
    let y = &view.train_y;
    let rmse = mean(&view.mean_at_train.iter().zip(y).map(|(m, v)| (m - v).powi(2)).collect::<Vec<_>>()).sqrt();
    let resemblance = COMPONENT_MAX * (1.0 - rmse / (sd(y) + EPS)).clamp(0.0, 1.0);

    let w = view.band_width();
    let [left, center, right] = windows(w.len());
    let w_center = mean(&w[center.clone()]);
    let w_edge = mean(&w[left.clone()]).max(mean(&w[right.clone()]));
    let w_bar = mean(&w);
    let y_range = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - y.iter().cloned().fold(f64::INFINITY, f64::min);
    let edge_ratio = w_edge / (w_center + EPS);
    let uncertainty = (COMPONENT_MAX * (1.0 - w_bar / (y_range + EPS)).clamp(0.0, 1.0)
        - 20.0 * (edge_ratio - 1.0).clamp(0.0, 1.0))
    .clamp(0.0, COMPONENT_MAX);

    let (gx, gm) = (&view.grid_x, &view.mean);
    let slope_center = mean_abs_slope(gx, gm, center);
    let flat: f64 = [left, right]
        .into_iter()
        .map(|r| 0.5 * (1.0 - mean_abs_slope(gx, gm, r) / (slope_center + EPS)).clamp(0.0, 1.0))
        .sum();
    let blowup = 0.5 * (edge_ratio - 2.0).clamp(0.0, 1.0);
    let generalizability = COMPONENT_MAX * (1.0 - flat - blowup).clamp(0.0, 1.0);
    (resemblance, uncertainty, generalizability)
}

pub fn heuristic_evaluate(model: &FittedModel, dataset: &Dataset) -> Result<EvaluatorReport, EvaluationError> {
    let view = PredictiveView::from_gp(model, dataset, DEFAULT_GRID_POINTS)?;
    Ok(heuristic_report(&view))
}

pub fn heuristic_report(view: &PredictiveView) -> EvaluatorReport {
    let (r, u, g) = heuristic_scores(view);
    EvaluatorReport {
        fitness_mean_resemblance: r,
        fitness_uncertainty: u,
        generalizability: g,
        n_repeats: 1,
        backend: EvaluatorKind::Heuristic,
        raw_replies: Vec::new(),
    }
}

/// Score component addressed by one prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Resemblance,
    Uncertainty,
    Generalizability,
}

/// One user message per scored component with the plots attached: the
/// resemblance prompt carries the data plot and the mean-only plot, the
/// others carry the full prediction plot.
pub fn build_prompts(family: ModelFamily, plots: &EvalPlots, prompts: &PromptSet) -> Vec<(Component, ChatMessage)> {
    match family {
        ModelFamily::Kernel => vec![
            (
                Component::Resemblance,
                ChatMessage::user(prompts.evaluator_resemblance.clone())
                    .with_images(vec![plots.data.clone(), plots.mean_only.clone()]),
            ),
            (
                Component::Uncertainty,
                ChatMessage::user(prompts.evaluator_uncertainty.clone()).with_images(vec![plots.prediction.clone()]),
            ),
            (
                Component::Generalizability,
                ChatMessage::user(prompts.evaluator_generalizability.clone())
                    .with_images(vec![plots.prediction.clone()]),
            ),
        ],
        ModelFamily::Function => vec![
            (
                Component::Resemblance,
                ChatMessage::user(prompts.sr_evaluator_fitness.clone())
                    .with_images(vec![plots.data.clone(), plots.mean_only.clone()]),
            ),
            (
                Component::Generalizability,
                ChatMessage::user(prompts.sr_evaluator_generalizability.clone())
                    .with_images(vec![plots.prediction.clone()]),
            ),
        ],
    }
}

pub fn reply_key(family: ModelFamily) -> &'static str {
    match family {
        ModelFamily::Kernel => "kernel1",
        ModelFamily::Function => "function1",
    }
}

/// Scores a view. Plots are written to `plot_dir` under `{stem}_*.png`
/// when a directory is given; the returned file names are empty otherwise.
pub fn evaluate_view(
    view: &PredictiveView,
    family: ModelFamily,
    backend: &EvaluatorBackend,
    n_repeats: usize,
    plot_dir: Option<&Path>,
    stem: &str,
) -> Result<(EvaluatorReport, Vec<String>), EvaluationError> {
    if n_repeats == 0 {
        return Err(EvaluationError::NoRepeats);
    }
    let needs_plots = plot_dir.is_some() || matches!(backend, EvaluatorBackend::Vlm { .. });
    let plots = if needs_plots { Some(view.plot_specs(stem).render(plot_dir)?) } else { None };
    let files = plots.as_ref().map(|p| p.files.clone()).unwrap_or_default();

    let report = match backend {
        EvaluatorBackend::Heuristic => heuristic_report(view),
        EvaluatorBackend::Vlm { client, prompts, temperature } => {
            let plots = plots.as_ref().expect("plots rendered for vlm backend");
            let key = reply_key(family);
            let mut sums = [0.0f64; 3];
            let mut raw_replies = Vec::new();
            for (component, message) in build_prompts(family, plots, prompts) {
                let slot = component as usize;
                for _ in 0..n_repeats {
                    let reply = client.chat(std::slice::from_ref(&message), *temperature)?;
                    let scores = parse_score_mapping(&reply, &[key], 0.0, COMPONENT_MAX)?;
                    sums[slot] += scores[key];
                    raw_replies.push(reply);
                }
            }
            let avg = |s: f64| s / n_repeats as f64;
            let uncertainty = match family {
                ModelFamily::Kernel => avg(sums[Component::Uncertainty as usize]),
                ModelFamily::Function => COMPONENT_MAX,
            };
            EvaluatorReport {
                fitness_mean_resemblance: avg(sums[Component::Resemblance as usize]),
                fitness_uncertainty: uncertainty,
                generalizability: avg(sums[Component::Generalizability as usize]),
                n_repeats,
                backend: EvaluatorKind::Vlm,
                raw_replies,
            }
        }
    };
    Ok((report, files))
}

/// Renders the data and prediction plots of a fitted GP and scores them.
pub fn evaluate(
    model: &FittedModel,
    dataset: &Dataset,
    backend: &EvaluatorBackend,
    n_repeats: usize,
) -> Result<EvaluatorReport, EvaluationError> {
    let view = PredictiveView::from_gp(model, dataset, DEFAULT_GRID_POINTS)?;
    evaluate_view(&view, ModelFamily::Kernel, backend, n_repeats, None, "eval").map(|(r, _)| r)
}
