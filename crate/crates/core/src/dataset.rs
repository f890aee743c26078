//! Loading, standardizing and partitioning of 1-D series.
//!
//! All model fitting happens on the normalized scale: `x` is mapped onto
//! `[0, 1]` over the full extent of the series and `y` is z-scored with the
//! statistics of the training slice only. The affine maps are kept on the
//! [`Dataset`] so values can always be taken back to data units.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv parse error at record {record}: {message}")]
    Parse { record: usize, message: String },
    #[error("non-finite value at record {record}")]
    NonFiniteValue { record: usize },
    #[error("series needs at least 2 rows, found {0}")]
    TooFewRows(usize),
    #[error("x and y lengths differ ({x} vs {y})")]
    LengthMismatch { x: usize, y: usize },
    #[error("duplicate x value {0}")]
    DuplicateX(f64),
    #[error("degenerate x range: all x values are equal")]
    DegenerateXRange,
    #[error("zero variance in training targets")]
    ZeroVariance,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

/// A raw series in data units, sorted by `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub name: String,
}

impl RawSeries {
    /// Builds a series, sorting by `x` and validating the invariants.
    pub fn new(name: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Result<Self, DatasetError> {
        if x.len() != y.len() {
            return Err(DatasetError::LengthMismatch { x: x.len(), y: y.len() });
        }
        if x.len() < 2 {
            return Err(DatasetError::TooFewRows(x.len()));
        }
        for (i, (a, b)) in x.iter().zip(&y).enumerate() {
            if !a.is_finite() || !b.is_finite() {
                return Err(DatasetError::NonFiniteValue { record: i + 1 });
            }
        }
        let mut pairs: Vec<(f64, f64)> = x.into_iter().zip(y).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(DatasetError::DuplicateX(w[0].0));
            }
        }
        let (x, y) = pairs.into_iter().unzip();
        Ok(Self { x, y, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Reads a two-column CSV with a header row. Extra columns are ignored.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawSeries, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".to_string());
    parse_csv(&name, &text)
}

/// Parses CSV text (header row + two numeric columns).
pub fn parse_csv(name: &str, text: &str) -> Result<RawSeries, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DatasetError::Parse { record: 0, message: e.to_string() })?
        .clone();
    if headers.len() < 2 {
        return Err(DatasetError::Parse {
            record: 0,
            message: format!("expected 2 header columns, found {}", headers.len()),
        });
    }
    if headers.len() > 2 {
        log::warn!("{name}: ignoring {} extra column(s)", headers.len() - 2);
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DatasetError::Parse { record: row, message: e.to_string() })?;
        if record.len() < 2 {
            return Err(DatasetError::Parse { record: row, message: "expected 2 columns".into() });
        }
        let parse = |s: &str| -> Result<f64, DatasetError> {
            let v: f64 = s.parse().map_err(|_| DatasetError::Parse {
                record: row,
                message: format!("not a number: {s:?}"),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(DatasetError::NonFiniteValue { record: row })
            }
        };
        x.push(parse(&record[0])?);
        y.push(parse(&record[1])?);
    }
    RawSeries::new(name, x, y)
}

/// `value = normalized * scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: f64,
    pub offset: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { scale: 1.0, offset: 0.0 };

    pub fn apply(&self, normalized: f64) -> f64 {
        normalized * self.scale + self.offset
    }

    pub fn invert(&self, value: f64) -> f64 {
        (value - self.offset) / self.scale
    }
}

/// A standardized series with train/validation/test partitions.
///
/// `test_idx` is always the largest-x contiguous suffix and `val_idx` the
/// tail of what remains, so every slice is contiguous in x order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub x_norm: Vec<f64>,
    pub y_norm: Vec<f64>,
    pub x_transform: Affine,
    pub y_transform: Affine,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

fn fraction_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// Maps x onto `[0, 1]`, z-scores y on the training slice and partitions the
/// indices into train / validation / test.
pub fn standardize_and_split(
    series: &RawSeries,
    test_fraction: f64,
    val_fraction: f64,
) -> Result<Dataset, DatasetError> {
    for (label, f) in [("test_fraction", test_fraction), ("val_fraction", val_fraction)] {
        if !(0.0..1.0).contains(&f) {
            return Err(DatasetError::InvalidSplit(format!("{label} must be in [0, 1), got {f}")));
        }
    }
    let n = series.len();
    if n < 2 {
        return Err(DatasetError::TooFewRows(n));
    }
    let n_test = fraction_count(test_fraction, n);
    let n_rest = n - n_test;
    let n_val = fraction_count(val_fraction, n_rest);
    let n_train = n_rest.saturating_sub(n_val);
    if n_train < 2 {
        return Err(DatasetError::InvalidSplit(format!(
            "split leaves {n_train} training point(s); need at least 2"
        )));
    }

    let x_min = series.x[0];
    let x_max = series.x[n - 1];
    let x_range = x_max - x_min;
    if x_range <= 0.0 {
        return Err(DatasetError::DegenerateXRange);
    }
    let x_transform = Affine { scale: x_range, offset: x_min };

    let train_y = &series.y[..n_train];
    let mean = train_y.iter().sum::<f64>() / n_train as f64;
    let var = train_y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_train as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) || sd < 1e-300 {
        return Err(DatasetError::ZeroVariance);
    }
    let y_transform = Affine { scale: sd, offset: mean };

    Ok(Dataset {
        name: series.name.clone(),
        x_norm: series.x.iter().map(|&v| x_transform.invert(v)).collect(),
        y_norm: series.y.iter().map(|&v| y_transform.invert(v)).collect(),
        x_transform,
        y_transform,
        train_idx: (0..n_train).collect(),
        val_idx: (n_train..n_rest).collect(),
        test_idx: (n_rest..n).collect(),
    })
}

/// Maps normalized targets back to data units.
pub fn inverse_transform(ds: &Dataset, y_norm_values: &[f64]) -> Vec<f64> {
    y_norm_values.iter().map(|&v| ds.y_transform.apply(v)).collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x_norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_norm.is_empty()
    }

    fn gather(values: &[f64], idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| values[i]).collect()
    }

    pub fn train_x(&self) -> Vec<f64> {
        Self::gather(&self.x_norm, &self.train_idx)
    }

    pub fn train_y(&self) -> Vec<f64> {
        Self::gather(&self.y_norm, &self.train_idx)
    }

    pub fn val_x(&self) -> Vec<f64> {
        Self::gather(&self.x_norm, &self.val_idx)
    }

    pub fn val_y(&self) -> Vec<f64> {
        Self::gather(&self.y_norm, &self.val_idx)
    }

    pub fn test_x(&self) -> Vec<f64> {
        Self::gather(&self.x_norm, &self.test_idx)
    }

    pub fn test_y(&self) -> Vec<f64> {
        Self::gather(&self.y_norm, &self.test_idx)
    }

    /// Recovers the original series in data units.
    pub fn raw(&self) -> RawSeries {
        RawSeries {
            name: self.name.clone(),
            x: self.x_norm.iter().map(|&v| self.x_transform.apply(v)).collect(),
            y: inverse_transform(self, &self.y_norm),
        }
    }

    /// Training inputs and targets in data units.
    pub fn train_raw(&self) -> (Vec<f64>, Vec<f64>) {
        let raw = self.raw();
        (Self::gather(&raw.x, &self.train_idx), Self::gather(&raw.y, &self.train_idx))
    }

    /// Full normalized x extent (train, validation and test).
    pub fn x_extent(&self) -> (f64, f64) {
        (self.x_norm[0], self.x_norm[self.len() - 1])
    }
}
