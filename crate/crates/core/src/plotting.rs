//! Deterministic PNG rendering of the plots the pipeline consumes.
//!
//! Colour roles are fixed: observed data is black, the posterior mean is red
//! and the 95% band is light blue. Prediction plots cover the data extent
//! plus a 20% margin on each side.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gp::Posterior;

pub const DEFAULT_WIDTH: u32 = 800;
pub const DEFAULT_HEIGHT: u32 = 500;
pub const DEFAULT_GRID_POINTS: usize = 300;
/// Extrapolation margin as a fraction of the data range, per side.
pub const MARGIN_FRACTION: f64 = 0.2;

pub type Rgb = [u8; 3];
pub const BLACK: Rgb = [0, 0, 0];
pub const RED: Rgb = [220, 20, 20];
pub const LIGHT_BLUE: Rgb = [173, 216, 230];
pub const GRAY: Rgb = [150, 150, 150];
const GRID: Rgb = [232, 232, 232];
const WHITE: Rgb = [255, 255, 255];

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("invalid plot spec: {0}")]
    InvalidSpec(String),
    #[error("render failed for {path}: {message}")]
    Render { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotKind {
    Data,
    Prediction,
    Residual,
    Periodogram,
    Series,
}

impl PlotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::Data => "data",
            PlotKind::Prediction => "prediction",
            PlotKind::Residual => "residual",
            PlotKind::Periodogram => "periodogram",
            PlotKind::Series => "series",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Band { x: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>, color: Rgb },
    Line { x: Vec<f64>, y: Vec<f64>, color: Rgb, dashed: bool },
    Points { x: Vec<f64>, y: Vec<f64>, color: Rgb },
    VLine { x: f64, color: Rgb },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub kind: PlotKind,
    /// File stem of the rendered PNG.
    pub name: String,
    pub title: String,
    pub width_px: u32,
    pub height_px: u32,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPlot {
    pub image_bytes: Vec<u8>,
    pub path: PathBuf,
    pub spec_digest: String,
}

impl RenderedPlot {
    pub fn file_name(&self) -> String {
        self.path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// Uniform grid over `[min - 0.2 r, max + 0.2 r]`, `r = max - min`.
pub fn extrapolation_grid(train_x_min: f64, train_x_max: f64, n_points: usize) -> Result<Vec<f64>, PlotError> {
    if !(train_x_max > train_x_min) || !train_x_min.is_finite() || !train_x_max.is_finite() {
        return Err(PlotError::InvalidSpec(format!(
            "degenerate range [{train_x_min}, {train_x_max}]"
        )));
    }
    if n_points < 2 {
        return Err(PlotError::InvalidSpec("grid needs at least 2 points".into()));
    }
    let range = train_x_max - train_x_min;
    let lo = train_x_min - MARGIN_FRACTION * range;
    let hi = train_x_max + MARGIN_FRACTION * range;
    let step = (hi - lo) / (n_points - 1) as f64;
    let mut grid: Vec<f64> = (0..n_points).map(|i| lo + step * i as f64).collect();
    grid[n_points - 1] = hi;
    Ok(grid)
}

impl PlotSpec {
    fn new(kind: PlotKind, name: impl Into<String>, title: impl Into<String>, layers: Vec<Layer>) -> Self {
        Self {
            kind,
            name: name.into(),
            title: title.into(),
            width_px: DEFAULT_WIDTH,
            height_px: DEFAULT_HEIGHT,
            layers,
        }
    }

    pub fn data(name: impl Into<String>, x: &[f64], y: &[f64]) -> Self {
        Self::new(
            PlotKind::Data,
            name,
            "data",
            vec![Layer::Line { x: x.to_vec(), y: y.to_vec(), color: BLACK, dashed: false }],
        )
    }

    /// Band (when `show_band`), training data, optional dashed test data and
    /// the posterior mean, with grey markers at the data extent.
    pub fn prediction(
        name: impl Into<String>,
        title: impl Into<String>,
        posterior: &Posterior,
        train: (&[f64], &[f64]),
        test: Option<(&[f64], &[f64])>,
        show_band: bool,
    ) -> Self {
        let mut layers = Vec::new();
        if show_band {
            layers.push(Layer::Band {
                x: posterior.grid_x.clone(),
                lower: posterior.low_q.clone(),
                upper: posterior.high_q.clone(),
                color: LIGHT_BLUE,
            });
        }
        let mut extent = train.0.to_vec();
        if let Some((tx, _)) = test {
            extent.extend_from_slice(tx);
        }
        if let (Some(first), Some(last)) = (extent.first(), extent.last()) {
            layers.push(Layer::VLine { x: *first, color: GRAY });
            layers.push(Layer::VLine { x: *last, color: GRAY });
        }
        layers.push(Layer::Line { x: train.0.to_vec(), y: train.1.to_vec(), color: BLACK, dashed: false });
        if let Some((tx, ty)) = test {
            if !tx.is_empty() {
                layers.push(Layer::Line { x: tx.to_vec(), y: ty.to_vec(), color: BLACK, dashed: true });
            }
        }
        layers.push(Layer::Line {
            x: posterior.grid_x.clone(),
            y: posterior.mean.clone(),
            color: RED,
            dashed: false,
        });
        Self::new(PlotKind::Prediction, name, title, layers)
    }

    pub fn residual(name: impl Into<String>, x: &[f64], residuals: &[f64]) -> Self {
        let zero = vec![0.0; x.len()];
        Self::new(
            PlotKind::Residual,
            name,
            "residuals",
            vec![
                Layer::Line { x: x.to_vec(), y: zero, color: GRAY, dashed: true },
                Layer::Line { x: x.to_vec(), y: residuals.to_vec(), color: BLACK, dashed: false },
            ],
        )
    }

    pub fn periodogram(name: impl Into<String>, frequency: &[f64], power: &[f64]) -> Self {
        Self::new(
            PlotKind::Periodogram,
            name,
            "periodogram",
            vec![Layer::Line { x: frequency.to_vec(), y: power.to_vec(), color: BLACK, dashed: false }],
        )
    }

    /// Several lines over a shared x, coloured black, red, grey, ...
    pub fn series(name: impl Into<String>, title: impl Into<String>, x: &[f64], ys: &[&[f64]]) -> Self {
        let colors = [BLACK, RED, GRAY, LIGHT_BLUE];
        let layers = ys
            .iter()
            .enumerate()
            .map(|(i, y)| Layer::Line { x: x.to_vec(), y: y.to_vec(), color: colors[i % colors.len()], dashed: i >= 2 })
            .collect();
        Self::new(PlotKind::Series, name, title, layers)
    }

    pub fn validate(&self) -> Result<(), PlotError> {
        if self.width_px < 64 || self.height_px < 64 {
            return Err(PlotError::InvalidSpec("canvas smaller than 64 px".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        for layer in &self.layers {
            let ok = match layer {
                Layer::Band { x, lower, upper, .. } => {
                    x.len() == lower.len() && x.len() == upper.len() && finite(x) && finite(lower) && finite(upper)
                }
                Layer::Line { x, y, .. } | Layer::Points { x, y, .. } => x.len() == y.len() && finite(x) && finite(y),
                Layer::VLine { x, .. } => x.is_finite(),
            };
            if !ok {
                return Err(PlotError::InvalidSpec(format!(
                    "{}: series lengths differ or contain non-finite values",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        let mut px = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            px.extend_from_slice(&WHITE);
        }
        Self { w, h, px }
    }

    fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn vspan(&mut self, x: i64, y0: i64, y1: i64, c: Rgb) {
        for y in y0.min(y1)..=y0.max(y1) {
            self.set(x, y, c);
        }
    }

    fn hspan(&mut self, y: i64, x0: i64, x1: i64, c: Rgb) {
        for x in x0.min(x1)..=x0.max(x1) {
            self.set(x, y, c);
        }
    }

    /// Bresenham segment with a 2-px brush. `phase` carries dash state.
    fn segment(&mut self, a: (i64, i64), b: (i64, i64), c: Rgb, dashed: bool, phase: &mut u32) {
        let (mut x0, mut y0) = a;
        let (x1, y1) = b;
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            if !dashed || (*phase / 6) % 2 == 0 {
                self.set(x0, y0, c);
                self.set(x0 + 1, y0, c);
                self.set(x0, y0 + 1, c);
            }
            *phase += 1;
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
}

struct Frame {
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn px(&self, x: f64) -> i64 {
        (self.left + (x - self.x_lo) / (self.x_hi - self.x_lo) * (self.right - self.left)).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        (self.bottom - (y - self.y_lo) / (self.y_hi - self.y_lo) * (self.bottom - self.top)).round() as i64
    }

    fn x_at(&self, px: i64) -> f64 {
        self.x_lo + (px as f64 - self.left) / (self.right - self.left) * (self.x_hi - self.x_lo)
    }
}

fn nice_step(range: f64) -> f64 {
    let raw = range / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm < 1.5 {
        1.0
    } else if norm < 3.5 {
        2.0
    } else if norm < 7.5 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    if xs.is_empty() || x < xs[0] || x > xs[xs.len() - 1] {
        return None;
    }
    let i = xs.partition_point(|v| *v < x);
    if i == 0 {
        return Some(ys[0]);
    }
    let (x0, x1, y0, y1) = (xs[i - 1], xs[i], ys[i - 1], ys[i]);
    if x1 == x0 {
        return Some(y1);
    }
    Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0))
}

fn frame_for(spec: &PlotSpec) -> Frame {
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut take = |xs: &[f64], ys: &[f64]| {
        for x in xs {
            x_lo = x_lo.min(*x);
            x_hi = x_hi.max(*x);
        }
        for y in ys {
            y_lo = y_lo.min(*y);
            y_hi = y_hi.max(*y);
        }
    };
    for layer in &spec.layers {
        match layer {
            Layer::Band { x, lower, upper, .. } => {
                take(x, lower);
                take(&[], upper);
            }
            Layer::Line { x, y, .. } | Layer::Points { x, y, .. } => take(x, y),
            Layer::VLine { .. } => {}
        }
    }
    if !x_lo.is_finite() {
        (x_lo, x_hi) = (0.0, 1.0);
    }
    if !y_lo.is_finite() {
        (y_lo, y_hi) = (0.0, 1.0);
    }
    if x_hi - x_lo < 1e-12 {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    if y_hi - y_lo < 1e-12 {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let pad = 0.05 * (y_hi - y_lo);
    Frame {
        left: 40.0,
        right: spec.width_px as f64 - 15.0,
        top: 15.0,
        bottom: spec.height_px as f64 - 25.0,
        x_lo,
        x_hi,
        y_lo: y_lo - pad,
        y_hi: y_hi + pad,
    }
}

fn rasterize(spec: &PlotSpec) -> Canvas {
    let mut canvas = Canvas::new(spec.width_px as usize, spec.height_px as usize);
    let f = frame_for(spec);

    let xs = nice_step(f.x_hi - f.x_lo);
    let mut t = (f.x_lo / xs).ceil() * xs;
    while t <= f.x_hi {
        canvas.vspan(f.px(t), f.top as i64, f.bottom as i64, GRID);
        t += xs;
    }
    let ys = nice_step(f.y_hi - f.y_lo);
    let mut t = (f.y_lo / ys).ceil() * ys;
    while t <= f.y_hi {
        canvas.hspan(f.py(t), f.left as i64, f.right as i64, GRID);
        t += ys;
    }

    for layer in &spec.layers {
        match layer {
            Layer::Band { x, lower, upper, color } => {
                for px in f.left as i64..=f.right as i64 {
                    let xv = f.x_at(px);
                    if let (Some(lo), Some(hi)) = (interp(x, lower, xv), interp(x, upper, xv)) {
                        canvas.vspan(px, f.py(lo), f.py(hi), *color);
                    }
                }
            }
            Layer::VLine { x, color } => {
                let px = f.px(*x);
                let mut y = f.top as i64;
                while y <= f.bottom as i64 {
                    if (y / 4) % 2 == 0 {
                        canvas.set(px, y, *color);
                    }
                    y += 1;
                }
            }
            Layer::Line { x, y, color, dashed } => {
                let mut phase = 0;
                for i in 1..x.len() {
                    canvas.segment((f.px(x[i - 1]), f.py(y[i - 1])), (f.px(x[i]), f.py(y[i])), *color, *dashed, &mut phase);
                }
                if x.len() == 1 {
                    canvas.set(f.px(x[0]), f.py(y[0]), *color);
                }
            }
            Layer::Points { x, y, color } => {
                for (a, b) in x.iter().zip(y) {
                    let (cx, cy) = (f.px(*a), f.py(*b));
                    for dx in -1..=1 {
                        for dy in -1..=1 {
                            canvas.set(cx + dx, cy + dy, *color);
                        }
                    }
                }
            }
        }
    }

    // axes frame
    let (l, r, t, b) = (f.left as i64, f.right as i64, f.top as i64, f.bottom as i64);
    canvas.hspan(t, l, r, GRAY);
    canvas.hspan(b, l, r, GRAY);
    canvas.vspan(l, t, b, GRAY);
    canvas.vspan(r, t, b, GRAY);
    canvas
}

/// Encodes the plot as PNG without touching the filesystem.
pub fn render_bytes(spec: &PlotSpec) -> Result<Vec<u8>, PlotError> {
    spec.validate()?;
    let canvas = rasterize(spec);
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, spec.width_px, spec.height_px);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let map = |e: png::EncodingError| PlotError::Render { path: spec.name.clone(), message: e.to_string() };
        let mut writer = enc.write_header().map_err(map)?;
        writer.write_image_data(&canvas.px).map_err(map)?;
        writer.finish().map_err(map)?;
    }
    Ok(out)
}

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Renders `spec` to `{out_dir}/{spec.name}.png`.
pub fn render(spec: &PlotSpec, out_dir: &Path) -> Result<RenderedPlot, PlotError> {
    let image_bytes = render_bytes(spec)?;
    let path = out_dir.join(format!("{}.png", spec.name));
    let io_err = |e: std::io::Error| PlotError::Render { path: path.display().to_string(), message: e.to_string() };
    std::fs::create_dir_all(out_dir).map_err(io_err)?;
    std::fs::write(&path, &image_bytes).map_err(io_err)?;
    let spec_digest = digest_hex(&image_bytes);
    Ok(RenderedPlot { image_bytes, path, spec_digest })
}

/// Reads width and height from a PNG header.
pub fn png_dimensions(bytes: &[u8]) -> Option<(u32, u32)> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let reader = decoder.read_info().ok()?;
    let info = reader.info();
    Some((info.width, info.height))
}
