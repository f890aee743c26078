//! Kernel expression language: base kernels composed with `+` and `*`.
//!
//! Expressions are kept in canonical form: n-ary sums and products are
//! flattened and their children sorted by canonical text, so two
//! structurally equal kernels always print the same way. The canonical text
//! is what keys the model pool.

mod parse;
mod schema;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use parse::{parse, ParseError};
pub use schema::{param_schema, ParamName, ParamSchema, ParamSpec, NOISE_LOWER, NOISE_UPPER};

pub(crate) fn schema_leaf_len(kind: BaseKernel) -> usize {
    schema::leaf_params(kind).len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BaseKernel {
    #[serde(rename = "LIN")]
    Lin,
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "C")]
    C,
    #[serde(rename = "WN")]
    Wn,
}

impl BaseKernel {
    pub const ALL: [BaseKernel; 5] =
        [BaseKernel::C, BaseKernel::Lin, BaseKernel::Per, BaseKernel::Se, BaseKernel::Wn];

    pub fn symbol(self) -> &'static str {
        match self {
            BaseKernel::Lin => "LIN",
            BaseKernel::Per => "PER",
            BaseKernel::Se => "SE",
            BaseKernel::C => "C",
            BaseKernel::Wn => "WN",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LIN" => Some(BaseKernel::Lin),
            "PER" => Some(BaseKernel::Per),
            "SE" => Some(BaseKernel::Se),
            "C" => Some(BaseKernel::C),
            "WN" => Some(BaseKernel::Wn),
            _ => None,
        }
    }
}

impl fmt::Display for BaseKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum KernelExpr {
    Leaf(BaseKernel),
    Sum(Vec<KernelExpr>),
    Product(Vec<KernelExpr>),
}

impl KernelExpr {
    pub fn leaf(kind: BaseKernel) -> Self {
        KernelExpr::Leaf(kind)
    }

    /// `a + b`, canonicalized.
    pub fn add(a: KernelExpr, b: KernelExpr) -> Self {
        KernelExpr::Sum(vec![a, b]).canonicalize()
    }

    /// `a * b`, canonicalized.
    pub fn mul(a: KernelExpr, b: KernelExpr) -> Self {
        KernelExpr::Product(vec![a, b]).canonicalize()
    }

    /// Flattens nested sums/products, collapses singleton nodes and sorts
    /// children by canonical text.
    pub fn canonicalize(&self) -> KernelExpr {
        match self {
            KernelExpr::Leaf(k) => KernelExpr::Leaf(*k),
            KernelExpr::Sum(children) => Self::canonical_nary(children, true),
            KernelExpr::Product(children) => Self::canonical_nary(children, false),
        }
    }

    fn canonical_nary(children: &[KernelExpr], is_sum: bool) -> KernelExpr {
        let mut flat = Vec::with_capacity(children.len());
        for child in children {
            match (child.canonicalize(), is_sum) {
                (KernelExpr::Sum(inner), true) | (KernelExpr::Product(inner), false) => {
                    flat.extend(inner)
                }
                (other, _) => flat.push(other),
            }
        }
        if flat.len() == 1 {
            return flat.pop().unwrap();
        }
        let mut keyed: Vec<(String, KernelExpr)> =
            flat.into_iter().map(|c| (c.canonical_text(), c)).collect();
        keyed.sort_by(|a, b| a.0.cmp(&b.0));
        let flat = keyed.into_iter().map(|(_, c)| c).collect();
        if is_sum {
            KernelExpr::Sum(flat)
        } else {
            KernelExpr::Product(flat)
        }
    }

    pub fn is_canonical(&self) -> bool {
        *self == self.canonicalize()
    }

    /// Text of the canonical form; `*` binds tighter than `+`.
    pub fn canonical_text(&self) -> String {
        let canon;
        let expr = if self.is_canonical_shallow() {
            self
        } else {
            canon = self.canonicalize();
            &canon
        };
        let mut out = String::new();
        expr.write_text(&mut out);
        out
    }

    // Cheap check used to avoid recursion in canonical_text while canonicalizing.
    fn is_canonical_shallow(&self) -> bool {
        match self {
            KernelExpr::Leaf(_) => true,
            KernelExpr::Sum(c) | KernelExpr::Product(c) => {
                c.len() >= 2
                    && c.iter().all(|child| match (self, child) {
                        (KernelExpr::Sum(_), KernelExpr::Sum(_)) => false,
                        (KernelExpr::Product(_), KernelExpr::Product(_)) => false,
                        _ => child.is_canonical_shallow(),
                    })
                    && c.windows(2).all(|w| {
                        let mut a = String::new();
                        let mut b = String::new();
                        w[0].write_text(&mut a);
                        w[1].write_text(&mut b);
                        a <= b
                    })
            }
        }
    }

    fn write_text(&self, out: &mut String) {
        match self {
            KernelExpr::Leaf(k) => out.push_str(k.symbol()),
            KernelExpr::Sum(children) => {
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        out.push_str(" + ");
                    }
                    c.write_text(out);
                }
            }
            KernelExpr::Product(children) => {
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        out.push_str(" * ");
                    }
                    if matches!(c, KernelExpr::Sum(_)) {
                        out.push('(');
                        c.write_text(out);
                        out.push(')');
                    } else {
                        c.write_text(out);
                    }
                }
            }
        }
    }

    /// Leaves in depth-first order. This order defines parameter layout.
    pub fn leaves(&self) -> Vec<BaseKernel> {
        let mut out = Vec::new();
        self.visit_leaves(&mut |k| out.push(k));
        out
    }

    fn visit_leaves(&self, f: &mut impl FnMut(BaseKernel)) {
        match self {
            KernelExpr::Leaf(k) => f(*k),
            KernelExpr::Sum(c) | KernelExpr::Product(c) => c.iter().for_each(|c| c.visit_leaves(f)),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            KernelExpr::Leaf(_) => 1,
            KernelExpr::Sum(c) | KernelExpr::Product(c) => c.iter().map(Self::leaf_count).sum(),
        }
    }

    /// Nesting depth; a single leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self {
            KernelExpr::Leaf(_) => 1,
            KernelExpr::Sum(c) | KernelExpr::Product(c) => {
                1 + c.iter().map(Self::depth).max().unwrap_or(0)
            }
        }
    }

    pub fn contains(&self, kind: BaseKernel) -> bool {
        self.leaves().contains(&kind)
    }

    /// Replaces the `index`-th leaf (depth-first) with `kind`; not canonicalized.
    pub fn replace_leaf(&self, index: usize, kind: BaseKernel) -> KernelExpr {
        let mut counter = 0;
        self.replace_leaf_inner(index, kind, &mut counter)
    }

    fn replace_leaf_inner(&self, index: usize, kind: BaseKernel, counter: &mut usize) -> KernelExpr {
        match self {
            KernelExpr::Leaf(k) => {
                let here = *counter;
                *counter += 1;
                KernelExpr::Leaf(if here == index { kind } else { *k })
            }
            KernelExpr::Sum(c) => KernelExpr::Sum(
                c.iter().map(|c| c.replace_leaf_inner(index, kind, counter)).collect(),
            ),
            KernelExpr::Product(c) => KernelExpr::Product(
                c.iter().map(|c| c.replace_leaf_inner(index, kind, counter)).collect(),
            ),
        }
    }
}

impl fmt::Display for KernelExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

impl std::str::FromStr for KernelExpr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

impl Serialize for KernelExpr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.canonical_text())
    }
}

impl<'de> Deserialize<'de> for KernelExpr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Grammar neighbourhood: `e + B`, `e * B` for every base kernel `B`, and
/// every single-leaf replacement by a different base kernel. The result is
/// canonical, deduplicated, excludes `expr` itself and is sorted by text.
pub fn neighbors(expr: &KernelExpr) -> Vec<KernelExpr> {
    let expr = expr.canonicalize();
    let mut seen = std::collections::BTreeMap::new();
    let mut push = |e: KernelExpr| {
        let e = e.canonicalize();
        seen.entry(e.canonical_text()).or_insert(e);
    };
    for b in BaseKernel::ALL {
        push(KernelExpr::Sum(vec![expr.clone(), KernelExpr::Leaf(b)]));
        push(KernelExpr::Product(vec![expr.clone(), KernelExpr::Leaf(b)]));
    }
    for (i, current) in expr.leaves().into_iter().enumerate() {
        for b in BaseKernel::ALL {
            if b != current {
                push(expr.replace_leaf(i, b));
            }
        }
    }
    let own = expr.canonical_text();
    seen.into_iter().filter(|(k, _)| *k != own).map(|(_, v)| v).collect()
}
