//! Analysis tools the agent can call: plots, residual statistics,
//! periodogram and parameter listings.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::evaluator::PredictiveView;
use crate::fitting::FittedModel;
use crate::gp::posterior_predict;
use crate::plotting::{self, PlotSpec, RenderedPlot, DEFAULT_GRID_POINTS};

/// Upper bound on the text returned to the agent.
pub const MAX_TOOL_TEXT: usize = 4096;
pub const MIN_PERIODOGRAM_POINTS: usize = 8;
pub const OVERSAMPLING: usize = 4;
/// Smoothing width (in bins) for the dominance statistic; roughly eight
/// independent frequencies at the default oversampling.
pub const DOMINANCE_SMOOTHING: usize = 31;
pub const DOMINANCE_RATIO: f64 = 3.0;

pub const TOOL_NAMES: [&str; 5] =
    ["render_data_plot", "render_prediction_plot", "residual_stats", "periodogram", "describe_params"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ToolError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolResult {
    pub text: String,
    pub plots: Vec<RenderedPlot>,
    pub table: Option<NumericTable>,
}

impl ToolResult {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: truncate_text(text.into()), plots: Vec::new(), table: None }
    }

    fn with_plot(mut self, plot: RenderedPlot) -> Self {
        self.plots.push(plot);
        self
    }
}

pub(crate) fn truncate_text(mut text: String) -> String {
    const NOTE: &str = "\n[truncated]";
    if text.len() > MAX_TOOL_TEXT {
        let mut cut = MAX_TOOL_TEXT - NOTE.len();
        while !text.is_char_boundary(cut) {
            cut -= 1;
        }
        text.truncate(cut);
        text.push_str(NOTE);
    }
    text
}

/// Renders into `out_dir` when given, otherwise only in memory.
pub(crate) fn render_plot(spec: &PlotSpec, out_dir: Option<&Path>) -> Result<RenderedPlot, ToolError> {
    let map = |e: plotting::PlotError| ToolError(e.to_string());
    match out_dir {
        Some(dir) => plotting::render(spec, dir).map_err(map),
        None => {
            let image_bytes = plotting::render_bytes(spec).map_err(map)?;
            Ok(RenderedPlot {
                spec_digest: plotting::digest_hex(&image_bytes),
                path: format!("{}.png", spec.name).into(),
                image_bytes,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSummary {
    pub mean: f64,
    pub sd: f64,
    pub lag1_autocorrelation: f64,
}

pub fn residual_summary(residuals: &[f64]) -> ResidualSummary {
    let n = residuals.len().max(1) as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let centered: Vec<f64> = residuals.iter().map(|r| r - mean).collect();
    let ss: f64 = centered.iter().map(|c| c * c).sum();
    let sd = (ss / n).sqrt();
    let lag1 = if ss > 0.0 { centered.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / ss } else { 0.0 };
    ResidualSummary { mean, sd, lag1_autocorrelation: lag1 }
}

/// Residual statistics plus a residual plot named `{name}`.
pub fn residual_stats(x: &[f64], residuals: &[f64], name: &str, out_dir: Option<&Path>) -> Result<ToolResult, ToolError> {
    let s = residual_summary(residuals);
    let text = format!(
        "residuals on {} training points: mean {:.6}, sd {:.6}, lag-1 autocorrelation {:.4}",
        residuals.len(),
        s.mean,
        s.sd,
        s.lag1_autocorrelation
    );
    let plot = render_plot(&PlotSpec::residual(name, x, residuals), out_dir)?;
    let mut out = ToolResult::new(text).with_plot(plot);
    out.table = Some(NumericTable {
        columns: vec!["mean".into(), "sd".into(), "lag1".into()],
        rows: vec![vec![s.mean, s.sd, s.lag1_autocorrelation]],
    });
    Ok(out)
}

/// Training residuals `y - posterior mean` of a fitted GP.
pub fn gp_residuals(model: &FittedModel, dataset: &Dataset) -> Result<(Vec<f64>, Vec<f64>), ToolError> {
    let (x, y) = (dataset.train_x(), dataset.train_y());
    let post = posterior_predict(&model.expr, &model.params, &x, &y, &x).map_err(|e| ToolError(e.to_string()))?;
    let r = y.iter().zip(&post.mean).map(|(a, b)| a - b).collect();
    Ok((x, r))
}

pub fn tool_residual_stats(model: &FittedModel, dataset: &Dataset) -> Result<ToolResult, ToolError> {
    let (x, r) = gp_residuals(model, dataset)?;
    residual_stats(&x, &r, "residuals", None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Periodogram {
    pub frequency: Vec<f64>,
    pub power: Vec<f64>,
    /// Up to three periods at the strongest local maxima, strongest first.
    pub top_periods: Vec<(f64, f64)>,
    /// Smoothed peak power over smoothed median power.
    pub dominance: f64,
    pub dominant: bool,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Power spectrum of the linearly detrended series at `OVERSAMPLING`-times
/// oversampled frequencies up to the mean-spacing Nyquist frequency. Works on
/// non-uniform x through a direct Fourier sum.
pub fn periodogram(x: &[f64], series: &[f64]) -> Result<Periodogram, ToolError> {
    let n = series.len();
    if n < MIN_PERIODOGRAM_POINTS || x.len() != n {
        return Err(ToolError(format!("periodogram needs at least {MIN_PERIODOGRAM_POINTS} points, got {n}")));
    }
    let span = x[n - 1] - x[0];
    if !(span > 0.0) {
        return Err(ToolError("x has zero span".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = series.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(series).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let resid: Vec<f64> = x.iter().zip(series).map(|(a, b)| b - my - slope * (a - mx)).collect();
    let scale = series.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    if resid.iter().all(|r| r.abs() <= 1e-12 * scale) {
        return Err(ToolError("series has no variation after removing the linear trend".into()));
    }

    let df = 1.0 / (OVERSAMPLING as f64 * span);
    let nyquist = (n - 1) as f64 / (2.0 * span);
    let k_max = (nyquist / df).floor() as usize;
    let frequency: Vec<f64> = (1..=k_max).map(|k| k as f64 * df).collect();
    let power: Vec<f64> = frequency
        .iter()
        .map(|f| {
            let (mut re, mut im) = (0.0, 0.0);
            for (xi, ri) in x.iter().zip(&resid) {
                let phase = 2.0 * PI * f * xi;
                re += ri * phase.cos();
                im -= ri * phase.sin();
            }
            (re * re + im * im) / n as f64
        })
        .collect();

    let mut peaks: Vec<(f64, f64)> = (0..power.len())
        .filter(|&i| (i == 0 || power[i] > power[i - 1]) && (i + 1 == power.len() || power[i] >= power[i + 1]))
        .map(|i| (1.0 / frequency[i], power[i]))
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.truncate(3);

    let half = DOMINANCE_SMOOTHING / 2;
    let smoothed: Vec<f64> = (0..power.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(power.len());
            power[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let peak = smoothed.iter().cloned().fold(0.0, f64::max);
    let med = median(&smoothed);
    let dominance = if med > 0.0 { peak / med } else { f64::INFINITY };
    Ok(Periodogram { frequency, power, top_periods: peaks, dominance, dominant: dominance >= DOMINANCE_RATIO })
}

pub fn tool_periodogram(series: &[f64], x: &[f64]) -> Result<ToolResult, ToolError> {
    periodogram_tool(series, x, "periodogram", None)
}

pub(crate) fn periodogram_tool(series: &[f64], x: &[f64], name: &str, out_dir: Option<&Path>) -> Result<ToolResult, ToolError> {
    let p = periodogram(x, series)?;
    let mut text = String::from("top periods (normalized x units) by power:\n");
    for (i, (period, power)) in p.top_periods.iter().enumerate() {
        text.push_str(&format!("{}. period {:.5} (frequency {:.3}), power {:.4}\n", i + 1, period, 1.0 / period, power));
    }
    text.push_str(&format!(
        "dominant peak: {} (smoothed peak / median power = {:.2})",
        if p.dominant { "yes" } else { "no" },
        p.dominance
    ));
    let plot = render_plot(&PlotSpec::periodogram(name, &p.frequency, &p.power), out_dir)?;
    let mut out = ToolResult::new(text).with_plot(plot);
    out.table = Some(NumericTable {
        columns: vec!["period".into(), "power".into()],
        rows: p.top_periods.iter().map(|(a, b)| vec![*a, *b]).collect(),
    });
    Ok(out)
}

pub fn describe_params_text(model: &FittedModel) -> String {
    let mut text = format!("kernel {} (train log-likelihood {:.4})\n", model.text(), model.train_loglik);
    for (label, value) in model.describe_params() {
        text.push_str(&format!("{label} = {value:.6}\n"));
    }
    text
}

pub(crate) fn prediction_plot(
    model: &FittedModel,
    dataset: &Dataset,
    name: &str,
    out_dir: Option<&Path>,
) -> Result<RenderedPlot, ToolError> {
    let view = PredictiveView::from_gp(model, dataset, DEFAULT_GRID_POINTS).map_err(|e| ToolError(e.to_string()))?;
    let mut spec = view.plot_specs(name).prediction;
    spec.name = name.to_string();
    render_plot(&spec, out_dir)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;

    #[test]
    fn sine_period_recovered() {
        let x: Vec<f64> = (0..144).map(|i| i as f64 / 143.0).collect();
        let y: Vec<f64> = x.iter().map(|v| (2.0 * PI * v * 12.0).sin()).collect();
        let p = periodogram(&x, &y).unwrap();
        let top = p.top_periods[0].0;
        assert!((top - 1.0 / 12.0).abs() / (1.0 / 12.0) < 0.05, "{top}");
        assert!(p.dominant);
    }

    #[test]
    fn white_noise_has_no_dominant_peak() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let x: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
            let y: Vec<f64> = x.iter().map(|_| normal.sample(&mut rng)).collect();
            let p = periodogram(&x, &y).unwrap();
            assert!(!p.dominant, "seed {seed}: {}", p.dominance);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert!(periodogram(&x, &[3.0; 20]).is_err());
        assert!(periodogram(&x[..5], &[1.0, 2.0, 1.0, 2.0, 1.0]).is_err());
        let e = tool_periodogram(&[1.0; 20], &x).unwrap_err();
        assert!(e.0.contains("no variation"));
    }

    #[test]
    fn residual_statistics() {
        let x: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let sine: Vec<f64> = x.iter().map(|v| (2.0 * PI * 3.0 * v).sin()).collect();
        assert!(residual_summary(&sine).lag1_autocorrelation > 0.5);
        let zero = residual_summary(&[0.0; 10]);
        assert_eq!((zero.sd, zero.lag1_autocorrelation), (0.0, 0.0));
        let r = residual_stats(&x, &sine, "r", None).unwrap();
        assert!(r.text.len() <= MAX_TOOL_TEXT);
        assert_eq!(r.plots.len(), 1);
    }

    #[test]
    fn text_is_capped() {
        let t = ToolResult::new("é".repeat(5000));
        assert!(t.text.len() <= MAX_TOOL_TEXT);
        assert!(t.text.ends_with("[truncated]"));
    }
}
