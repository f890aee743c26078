use thiserror::Error;

use super::{BaseKernel, KernelExpr};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unknown token {token:?} at position {pos}")]
    UnknownToken { token: String, pos: usize },
    #[error("unbalanced parentheses at position {pos}")]
    Unbalanced { pos: usize },
    #[error("unexpected {found} at position {pos}")]
    Unexpected { found: String, pos: usize },
    #[error("empty kernel expression")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Base(BaseKernel),
    Plus,
    Star,
    Open,
    Close,
}

fn describe(tok: Option<&(Tok, usize)>) -> String {
    match tok {
        None => "end of input".into(),
        Some((Tok::Base(k), _)) => k.symbol().into(),
        Some((Tok::Plus, _)) => "'+'".into(),
        Some((Tok::Star, _)) => "'*'".into(),
        Some((Tok::Open, _)) => "'('".into(),
        Some((Tok::Close, _)) => "')'".into(),
    }
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        match c {
            c if c.is_whitespace() => {
                chars.next();
            }
            '+' => {
                chars.next();
                out.push((Tok::Plus, pos));
            }
            '*' | '×' => {
                chars.next();
                out.push((Tok::Star, pos));
            }
            '(' => {
                chars.next();
                out.push((Tok::Open, pos));
            }
            ')' => {
                chars.next();
                out.push((Tok::Close, pos));
            }
            c if c.is_ascii_alphanumeric() || c == '_' => {
                let mut word = String::new();
                while let Some(&(_, c)) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        word.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                match BaseKernel::from_symbol(&word) {
                    Some(k) => out.push((Tok::Base(k), pos)),
                    None => return Err(ParseError::UnknownToken { token: word, pos }),
                }
            }
            other => return Err(ParseError::UnknownToken { token: other.to_string(), pos }),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    at: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(Tok, usize)> {
        self.toks.get(self.at)
    }

    fn pos(&self) -> usize {
        self.peek().map(|t| t.1).unwrap_or(self.len)
    }

    fn sum(&mut self) -> Result<KernelExpr, ParseError> {
        let mut terms = vec![self.product()?];
        while matches!(self.peek(), Some((Tok::Plus, _))) {
            self.at += 1;
            terms.push(self.product()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { KernelExpr::Sum(terms) })
    }

    fn product(&mut self) -> Result<KernelExpr, ParseError> {
        let mut factors = vec![self.atom()?];
        while matches!(self.peek(), Some((Tok::Star, _))) {
            self.at += 1;
            factors.push(self.atom()?);
        }
        Ok(if factors.len() == 1 { factors.pop().unwrap() } else { KernelExpr::Product(factors) })
    }

    fn atom(&mut self) -> Result<KernelExpr, ParseError> {
        match self.peek().cloned() {
            Some((Tok::Base(k), _)) => {
                self.at += 1;
                Ok(KernelExpr::Leaf(k))
            }
            Some((Tok::Open, open_pos)) => {
                self.at += 1;
                let inner = self.sum()?;
                match self.peek() {
                    Some((Tok::Close, _)) => {
                        self.at += 1;
                        Ok(inner)
                    }
                    None => Err(ParseError::Unbalanced { pos: open_pos }),
                    other => Err(ParseError::Unexpected { found: describe(other), pos: self.pos() }),
                }
            }
            Some((Tok::Close, pos)) => Err(ParseError::Unbalanced { pos }),
            other => Err(ParseError::Unexpected { found: describe(other.as_ref()), pos: self.pos() }),
        }
    }
}

/// Parses kernel text such as `LIN * (PER + SE)` into canonical form.
///
/// `*` binds tighter than `+`. Symbols are case-insensitive.
pub fn parse(text: &str) -> Result<KernelExpr, ParseError> {
    let toks = tokenize(text)?;
    if toks.is_empty() {
        return Err(ParseError::Empty);
    }
    let mut p = Parser { toks, at: 0, len: text.len() };
    let expr = p.sum()?;
    if let Some((tok, pos)) = p.peek() {
        return Err(match tok {
            Tok::Close => ParseError::Unbalanced { pos: *pos },
            _ => ParseError::Unexpected { found: describe(p.peek()), pos: *pos },
        });
    }
    Ok(expr.canonicalize())
}
