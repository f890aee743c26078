//! Function expressions over `x` with free coefficients `c0, c1, ...`.
//!
//! Grammar (whitespace ignored):
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary ('*' unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' integer)?
//! atom    := number | 'x' | 'c' digits | func '(' sum ')' | '(' sum ')'
//! func    := sin | cos | tan | sinh | cosh | sqrt | exp | log | abs
//! ```
//!
//! `sqrt` and `log` act on `|u|` (log on `|u| + 1e-12`), so every
//! expression is defined for every real input.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Added to `|u|` inside `log`.
pub const LOG_EPS: f64 = 1e-12;

/// Longest accepted function text, in bytes.
pub const MAX_TEXT_LEN: usize = 512;

/// Largest accepted integer exponent magnitude.
pub const MAX_EXPONENT: i32 = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse function `{text}` at byte {pos}: {message}")]
pub struct FuncParseError {
    pub text: String,
    pub pos: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Sinh,
    Cosh,
    Sqrt,
    Exp,
    Log,
    Abs,
}

impl Func {
    pub const ALL: [Func; 9] =
        [Func::Sin, Func::Cos, Func::Tan, Func::Sinh, Func::Cosh, Func::Sqrt, Func::Exp, Func::Log, Func::Abs];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Sinh => "sinh",
            Func::Cosh => "cosh",
            Func::Sqrt => "sqrt",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Value and derivative at `u`.
    fn apply(self, u: f64) -> (f64, f64) {
        let sign = if u > 0.0 {
            1.0
        } else if u < 0.0 {
            -1.0
        } else {
            0.0
        };
        match self {
            Func::Sin => (u.sin(), u.cos()),
            Func::Cos => (u.cos(), -u.sin()),
            Func::Tan => {
                let t = u.tan();
                (t, 1.0 + t * t)
            }
            Func::Sinh => (u.sinh(), u.cosh()),
            Func::Cosh => (u.cosh(), u.sinh()),
            Func::Sqrt => {
                let s = u.abs().sqrt();
                (s, if s > 0.0 { sign * 0.5 / s } else { 0.0 })
            }
            Func::Exp => {
                let e = u.exp();
                (e, e)
            }
            Func::Log => ((u.abs() + LOG_EPS).ln(), sign / (u.abs() + LOG_EPS)),
            Func::Abs => (u.abs(), sign),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FuncExpr {
    X,
    Coef(usize),
    Const(f64),
    Neg(Box<FuncExpr>),
    Add(Box<FuncExpr>, Box<FuncExpr>),
    Sub(Box<FuncExpr>, Box<FuncExpr>),
    Mul(Box<FuncExpr>, Box<FuncExpr>),
    Pow(Box<FuncExpr>, i32),
    Call(Func, Box<FuncExpr>),
}

impl FuncExpr {
    /// Number of AST nodes; the complexity measure.
    pub fn node_count(&self) -> usize {
        match self {
            FuncExpr::X | FuncExpr::Coef(_) | FuncExpr::Const(_) => 1,
            FuncExpr::Neg(a) | FuncExpr::Pow(a, _) | FuncExpr::Call(_, a) => 1 + a.node_count(),
            FuncExpr::Add(a, b) | FuncExpr::Sub(a, b) | FuncExpr::Mul(a, b) => 1 + a.node_count() + b.node_count(),
        }
    }

    /// Number of distinct coefficients; after parsing they are `c0..c{n-1}`.
    pub fn n_coefficients(&self) -> usize {
        match self {
            FuncExpr::X | FuncExpr::Const(_) => 0,
            FuncExpr::Coef(i) => i + 1,
            FuncExpr::Neg(a) | FuncExpr::Pow(a, _) | FuncExpr::Call(_, a) => a.n_coefficients(),
            FuncExpr::Add(a, b) | FuncExpr::Sub(a, b) | FuncExpr::Mul(a, b) => a.n_coefficients().max(b.n_coefficients()),
        }
    }

    pub fn eval(&self, x: f64, coefs: &[f64]) -> f64 {
        match self {
            FuncExpr::X => x,
            FuncExpr::Coef(i) => coefs[*i],
            FuncExpr::Const(v) => *v,
            FuncExpr::Neg(a) => -a.eval(x, coefs),
            FuncExpr::Add(a, b) => a.eval(x, coefs) + b.eval(x, coefs),
            FuncExpr::Sub(a, b) => a.eval(x, coefs) - b.eval(x, coefs),
            FuncExpr::Mul(a, b) => a.eval(x, coefs) * b.eval(x, coefs),
            FuncExpr::Pow(a, n) => a.eval(x, coefs).powi(*n),
            FuncExpr::Call(f, a) => f.apply(a.eval(x, coefs)).0,
        }
    }

    /// Value and gradient with respect to the coefficients, by forward
    /// accumulation.
    pub fn eval_grad(&self, x: f64, coefs: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; coefs.len()];
        let v = self.forward(x, coefs, &mut grad);
        (v, grad)
    }

    fn forward(&self, x: f64, coefs: &[f64], grad: &mut [f64]) -> f64 {
        let n = coefs.len();
        match self {
            FuncExpr::X => x,
            FuncExpr::Const(v) => *v,
            FuncExpr::Coef(i) => {
                grad[*i] = 1.0;
                coefs[*i]
            }
            FuncExpr::Neg(a) => {
                let v = a.forward(x, coefs, grad);
                grad.iter_mut().for_each(|g| *g = -*g);
                -v
            }
            FuncExpr::Add(a, b) | FuncExpr::Sub(a, b) => {
                let va = a.forward(x, coefs, grad);
                let mut gb = vec![0.0; n];
                let vb = b.forward(x, coefs, &mut gb);
                let s = if matches!(self, FuncExpr::Sub(..)) { -1.0 } else { 1.0 };
                grad.iter_mut().zip(&gb).for_each(|(g, h)| *g += s * h);
                va + s * vb
            }
            FuncExpr::Mul(a, b) => {
                let va = a.forward(x, coefs, grad);
                let mut gb = vec![0.0; n];
                let vb = b.forward(x, coefs, &mut gb);
                grad.iter_mut().zip(&gb).for_each(|(g, h)| *g = *g * vb + va * h);
                va * vb
            }
            FuncExpr::Pow(a, k) => {
                let va = a.forward(x, coefs, grad);
                let d = if *k == 0 { 0.0 } else { *k as f64 * va.powi(k - 1) };
                grad.iter_mut().for_each(|g| *g *= d);
                va.powi(*k)
            }
            FuncExpr::Call(f, a) => {
                let va = a.forward(x, coefs, grad);
                let (v, d) = f.apply(va);
                grad.iter_mut().for_each(|g| *g *= d);
                v
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            FuncExpr::Add(..) | FuncExpr::Sub(..) => 1,
            FuncExpr::Mul(..) => 2,
            FuncExpr::Neg(_) => 3,
            FuncExpr::Pow(..) => 4,
            FuncExpr::Const(v) if v.is_sign_negative() => 3,
            FuncExpr::X | FuncExpr::Coef(_) | FuncExpr::Const(_) | FuncExpr::Call(..) => 5,
        }
    }

    fn write_child(&self, f: &mut fmt::Formatter<'_>, child: &FuncExpr, min_prec: u8) -> fmt::Result {
        if child.precedence() < min_prec {
            write!(f, "({child})")
        } else {
            write!(f, "{child}")
        }
    }
}

impl fmt::Display for FuncExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FuncExpr::X => f.write_str("x"),
            FuncExpr::Coef(i) => write!(f, "c{i}"),
            FuncExpr::Const(v) => write!(f, "{v}"),
            FuncExpr::Neg(a) => {
                f.write_str("-")?;
                self.write_child(f, a, 3)
            }
            FuncExpr::Add(a, b) => {
                self.write_child(f, a, 1)?;
                f.write_str(" + ")?;
                self.write_child(f, b, 2)
            }
            FuncExpr::Sub(a, b) => {
                self.write_child(f, a, 1)?;
                f.write_str(" - ")?;
                self.write_child(f, b, 2)
            }
            FuncExpr::Mul(a, b) => {
                self.write_child(f, a, 2)?;
                f.write_str("*")?;
                self.write_child(f, b, 3)
            }
            FuncExpr::Pow(a, n) => {
                self.write_child(f, a, 5)?;
                write!(f, "^{n}")
            }
            FuncExpr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

impl std::str::FromStr for FuncExpr {
    type Err = FuncParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_function(s)
    }
}

impl Serialize for FuncExpr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FuncExpr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_function(&text).map_err(serde::de::Error::custom)
    }
}

struct Parser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
    /// Coefficient ids in order of first appearance.
    coef_order: Vec<usize>,
}

impl<'a> Parser<'a> {
    fn error<T>(&self, message: impl Into<String>) -> Result<T, FuncParseError> {
        Err(FuncParseError { text: self.text.to_string(), pos: self.pos, message: message.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn sum(&mut self) -> Result<FuncExpr, FuncParseError> {
        let mut lhs = self.product()?;
        loop {
            if self.eat(b'+') {
                lhs = FuncExpr::Add(Box::new(lhs), Box::new(self.product()?));
            } else if self.eat(b'-') {
                lhs = FuncExpr::Sub(Box::new(lhs), Box::new(self.product()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn product(&mut self) -> Result<FuncExpr, FuncParseError> {
        let mut lhs = self.unary()?;
        while self.eat(b'*') {
            lhs = FuncExpr::Mul(Box::new(lhs), Box::new(self.unary()?));
        }
        if self.peek() == Some(b'/') {
            return self.error("division is not part of the grammar");
        }
        Ok(lhs)
    }

    fn power(&mut self) -> Result<FuncExpr, FuncParseError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let negative = self.eat(b'-');
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            let Ok(mut n) = self.text[start..self.pos].parse::<i32>() else {
                return self.error("exponent must be an integer");
            };
            if negative {
                n = -n;
            }
            if n.abs() > MAX_EXPONENT {
                return self.error(format!("exponent magnitude above {MAX_EXPONENT}"));
            }
            if self.peek() == Some(b'.') {
                return self.error("exponent must be an integer");
            }
            return Ok(FuncExpr::Pow(Box::new(base), n));
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<FuncExpr, FuncParseError> {
        if self.eat(b'-') {
            return Ok(match self.unary()? {
                FuncExpr::Const(v) => FuncExpr::Const(-v),
                other => FuncExpr::Neg(Box::new(other)),
            });
        }
        self.power()
    }

    fn atom(&mut self) -> Result<FuncExpr, FuncParseError> {
        match self.peek() {
            None => self.error("unexpected end of input"),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.sum()?;
                if !self.eat(b')') {
                    return self.error("expected `)`");
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self.pos < self.bytes.len()
                    && (self.bytes[self.pos].is_ascii_digit()
                        || self.bytes[self.pos] == b'.'
                        || (matches!(self.bytes[self.pos], b'e' | b'E')
                            && self.bytes.get(self.pos + 1).is_some_and(|n| n.is_ascii_digit() || *n == b'-')))
                {
                    if matches!(self.bytes[self.pos], b'e' | b'E') && self.bytes[self.pos + 1] == b'-' {
                        self.pos += 1;
                    }
                    self.pos += 1;
                }
                match self.text[start..self.pos].parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(FuncExpr::Const(v)),
                    _ => self.error("malformed number"),
                }
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_alphanumeric() {
                    self.pos += 1;
                }
                let word = &self.text[start..self.pos];
                if word == "x" {
                    return Ok(FuncExpr::X);
                }
                if let Some(id) = word.strip_prefix('c').and_then(|d| d.parse::<usize>().ok()) {
                    let idx = match self.coef_order.iter().position(|&c| c == id) {
                        Some(i) => i,
                        None => {
                            self.coef_order.push(id);
                            self.coef_order.len() - 1
                        }
                    };
                    return Ok(FuncExpr::Coef(idx));
                }
                let Some(func) = Func::from_name(word) else {
                    self.pos = start;
                    return self.error(format!("unknown name `{word}`"));
                };
                if !self.eat(b'(') {
                    return self.error(format!("expected `(` after {word}"));
                }
                let arg = self.sum()?;
                if !self.eat(b')') {
                    return self.error("expected `)`");
                }
                Ok(FuncExpr::Call(func, Box::new(arg)))
            }
            Some(c) => self.error(format!("unexpected character `{}`", c as char)),
        }
    }
}

/// Parses function text. Coefficient names are renumbered `c0, c1, ...` in
/// order of first appearance, so `c3*x + c1` becomes `c0*x + c1` and the
/// printed form is a stable key.
pub fn parse_function(text: &str) -> Result<FuncExpr, FuncParseError> {
    let text = text.trim();
    if text.len() > MAX_TEXT_LEN {
        return Err(FuncParseError { text: text.into(), pos: MAX_TEXT_LEN, message: "text too long".into() });
    }
    let mut p = Parser { text, bytes: text.as_bytes(), pos: 0, coef_order: Vec::new() };
    let expr = p.sum()?;
    if p.peek().is_some() {
        return p.error("trailing input");
    }
    Ok(expr)
}
