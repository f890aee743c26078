use std::collections::BTreeMap;

use super::VlmError;

struct Cursor<'a> {
    s: &'a [u8],
    i: usize,
}

impl Cursor<'_> {
    fn ws(&mut self) {
        while self.i < self.s.len() && self.s[self.i].is_ascii_whitespace() {
            self.i += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.i).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn quoted(&mut self) -> Option<String> {
        let q = self.peek().filter(|c| *c == b'"' || *c == b'\'')?;
        self.i += 1;
        let start = self.i;
        while self.i < self.s.len() && self.s[self.i] != q {
            if self.s[self.i] == b'\\' {
                self.i += 1;
            }
            self.i += 1;
        }
        if self.i >= self.s.len() {
            return None;
        }
        let text = String::from_utf8_lossy(&self.s[start..self.i]).into_owned();
        self.i += 1;
        Some(text)
    }

    fn key(&mut self) -> Option<String> {
        if let Some(k) = self.quoted() {
            return Some(k);
        }
        let start = self.i;
        while self.i < self.s.len() && (self.s[self.i].is_ascii_alphanumeric() || self.s[self.i] == b'_') {
            self.i += 1;
        }
        (self.i > start).then(|| String::from_utf8_lossy(&self.s[start..self.i]).into_owned())
    }

    fn number(&mut self) -> Option<f64> {
        if let Some(q) = self.quoted() {
            return q.trim().parse::<f64>().ok().filter(|v| v.is_finite());
        }
        let start = self.i;
        while self.i < self.s.len() && matches!(self.s[self.i], b'0'..=b'9' | b'.' | b'-' | b'+' | b'e' | b'E') {
            self.i += 1;
        }
        std::str::from_utf8(&self.s[start..self.i]).ok()?.parse::<f64>().ok().filter(|v| v.is_finite())
    }

    /// A flat mapping literal with string or identifier keys and numeric
    /// values, starting at the current `{`.
    fn mapping(&mut self) -> Option<Vec<(String, f64)>> {
        if !self.eat(b'{') {
            return None;
        }
        let mut out = Vec::new();
        loop {
            self.ws();
            if self.eat(b'}') {
                return Some(out);
            }
            let key = self.key()?;
            self.ws();
            if !self.eat(b':') {
                return None;
            }
            self.ws();
            let value = self.number()?;
            out.push((key, value));
            self.ws();
            if self.eat(b',') {
                continue;
            }
            self.ws();
            if self.eat(b'}') {
                return Some(out);
            }
            return None;
        }
    }
}

/// Extracts the first well-formed mapping literal from `reply`, requires all
/// `expected_keys` and clamps their values into `[lo, hi]`. Returns only the
/// expected keys.
pub fn parse_score_mapping(
    reply: &str,
    expected_keys: &[&str],
    lo: f64,
    hi: f64,
) -> Result<BTreeMap<String, f64>, VlmError> {
    let bytes = reply.as_bytes();
    let parse_err = |message: String| VlmError::Parse { message, raw: reply.to_string() };
    let mapping = (0..bytes.len())
        .filter(|&i| bytes[i] == b'{')
        .find_map(|i| Cursor { s: bytes, i }.mapping().filter(|m| !m.is_empty()))
        .ok_or_else(|| parse_err("no key-value mapping found".into()))?;

    let mut out = BTreeMap::new();
    for key in expected_keys {
        let Some((_, value)) = mapping.iter().find(|(k, _)| k.trim() == *key) else {
            return Err(parse_err(format!("missing key `{key}`")));
        };
        let clamped = value.clamp(lo, hi);
        if clamped != *value {
            log::warn!("score {key}={value} outside [{lo}, {hi}], clamped to {clamped}");
        }
        out.insert((*key).to_string(), clamped);
    }
    Ok(out)
}
