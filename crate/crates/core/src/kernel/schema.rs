use std::fmt;

use serde::{Deserialize, Serialize};

use super::{BaseKernel, KernelExpr};

/// Bounds on the Gaussian likelihood noise variance (natural units).
pub const NOISE_LOWER: f64 = 1e-6;
pub const NOISE_UPPER: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamName {
    Variance,
    Lengthscale,
    Period,
    Offset,
}

impl ParamName {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamName::Variance => "variance",
            ParamName::Lengthscale => "lengthscale",
            ParamName::Period => "period",
            ParamName::Offset => "offset",
        }
    }

    pub fn from_str_loose(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "variance" | "var" | "sigma2" => Some(ParamName::Variance),
            "lengthscale" | "length_scale" | "ls" | "l" => Some(ParamName::Lengthscale),
            "period" | "p" => Some(ParamName::Period),
            "offset" | "c" => Some(ParamName::Offset),
            _ => None,
        }
    }

    /// Natural-unit bounds.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ParamName::Variance => (1e-6, 1e3),
            ParamName::Lengthscale => (1e-4, 1e2),
            ParamName::Period => (1e-3, 2.0),
            ParamName::Offset => (-2.0, 3.0),
        }
    }

    /// Positive parameters are optimized in log space; the LIN offset is not.
    pub fn is_log(self) -> bool {
        !matches!(self, ParamName::Offset)
    }
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub(crate) fn leaf_params(kind: BaseKernel) -> &'static [ParamName] {
    use ParamName::*;
    match kind {
        BaseKernel::Se => &[Variance, Lengthscale],
        BaseKernel::Per => &[Variance, Lengthscale, Period],
        BaseKernel::Lin => &[Variance, Offset],
        BaseKernel::C => &[Variance],
        BaseKernel::Wn => &[Variance],
    }
}

/// One kernel hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    /// Depth-first leaf index in the canonical expression.
    pub leaf: usize,
    /// Occurrence of this base kind among leaves (0 for the first `PER`, ...).
    pub ordinal: usize,
    pub kind: BaseKernel,
    pub name: ParamName,
    /// Bounds in optimizer space (log for positive parameters).
    pub lower: f64,
    pub upper: f64,
}

impl ParamSpec {
    pub fn is_log(&self) -> bool {
        self.name.is_log()
    }

    pub fn to_natural(&self, v: f64) -> f64 {
        if self.is_log() {
            v.exp()
        } else {
            v
        }
    }

    pub fn from_natural(&self, v: f64) -> f64 {
        if self.is_log() {
            v.max(f64::MIN_POSITIVE).ln()
        } else {
            v
        }
    }

    /// Label such as `PER.period` or `SE#1.lengthscale` for the second SE leaf.
    pub fn label(&self) -> String {
        if self.ordinal == 0 {
            format!("{}.{}", self.kind, self.name)
        } else {
            format!("{}#{}.{}", self.kind, self.ordinal, self.name)
        }
    }
}

/// Ordered hyperparameter layout of a kernel expression (noise excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSchema {
    pub params: Vec<ParamSpec>,
}

impl ParamSchema {
    /// Number of kernel hyperparameters.
    pub fn k_kernel(&self) -> usize {
        self.params.len()
    }

    /// Kernel hyperparameters plus the likelihood noise.
    pub fn n_params(&self) -> usize {
        self.params.len() + 1
    }

    /// Optimizer-space bounds for all parameters, noise last.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.params
            .iter()
            .map(|p| (p.lower, p.upper))
            .chain(std::iter::once((NOISE_LOWER.ln(), NOISE_UPPER.ln())))
            .collect()
    }

    /// Finds a parameter by label (`PER.period`, `SE#1.lengthscale`).
    pub fn find(&self, label: &str) -> Option<usize> {
        let (head, name) = label.rsplit_once('.')?;
        let name = ParamName::from_str_loose(name)?;
        let (kind, ordinal) = match head.split_once('#') {
            Some((k, o)) => (BaseKernel::from_symbol(k.trim())?, o.trim().parse().ok()?),
            None => (BaseKernel::from_symbol(head.trim())?, 0),
        };
        self.params
            .iter()
            .position(|p| p.kind == kind && p.ordinal == ordinal && p.name == name)
    }
}

/// Parameter layout: leaves in depth-first canonical order, each contributing
/// SE(variance, lengthscale), PER(variance, lengthscale, period),
/// LIN(variance, offset), C(variance) or WN(variance).
pub fn param_schema(expr: &KernelExpr) -> ParamSchema {
    let expr = expr.canonicalize();
    let mut params = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (leaf, kind) in expr.leaves().into_iter().enumerate() {
        let ordinal = *seen.entry(kind).and_modify(|c| *c += 1).or_insert(0usize);
        for &name in leaf_params(kind) {
            let (lo, hi) = name.bounds();
            let (lower, upper) = if name.is_log() { (lo.ln(), hi.ln()) } else { (lo, hi) };
            params.push(ParamSpec { leaf, ordinal, kind, name, lower, upper });
        }
    }
    ParamSchema { params }
}
