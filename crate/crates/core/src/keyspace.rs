//! Key expressions and selectors.
//!
//! A key expression is a `/`-separated list of chunks. A chunk is either a
//! literal, `*` (exactly one chunk) or `**` (zero or more chunks). A key
//! expression without wildcards is a concrete path. A selector is a key
//! expression optionally followed by a property predicate `?(k=v;k2=v2)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("empty key expression")]
    EmptyInput,
    #[error("key expression must start with '/': {0:?}")]
    MissingLeadingSeparator(String),
    #[error("empty chunk at position {0}")]
    EmptyChunk(usize),
    #[error("invalid wildcard chunk {0:?}")]
    InvalidWildcard(String),
    #[error("invalid character {ch:?} in chunk {chunk:?}")]
    InvalidCharacter { chunk: String, ch: char },
    #[error("malformed predicate: {0}")]
    MalformedPredicate(String),
    #[error("path {0} is not concrete")]
    NonConcretePath(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Chunk {
    Literal(String),
    Star,
    DoubleStar,
}

impl Chunk {
    pub fn is_wild(&self) -> bool {
        !matches!(self, Chunk::Literal(_))
    }

    fn as_str(&self) -> &str {
        match self {
            Chunk::Literal(s) => s,
            Chunk::Star => "*",
            Chunk::DoubleStar => "**",
        }
    }
}

/// A canonical key expression. Equality and ordering follow the canonical text.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyExpr {
    text: String,
    chunks: Vec<Chunk>,
}

impl KeyExpr {
    /// Builds a key expression from chunks, collapsing adjacent `**`.
    pub fn from_chunks(chunks: Vec<Chunk>) -> Result<Self, KeyError> {
        if chunks.is_empty() {
            return Err(KeyError::EmptyInput);
        }
        for (i, c) in chunks.iter().enumerate() {
            if let Chunk::Literal(s) = c {
                check_literal(s, i)?;
            }
        }
        let mut canon: Vec<Chunk> = Vec::with_capacity(chunks.len());
        for c in chunks {
            if c == Chunk::DoubleStar && canon.last() == Some(&Chunk::DoubleStar) {
                continue;
            }
            canon.push(c);
        }
        let mut text = String::new();
        for c in &canon {
            text.push('/');
            text.push_str(c.as_str());
        }
        Ok(KeyExpr {
            text,
            chunks: canon,
        })
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn is_concrete(&self) -> bool {
        self.chunks.iter().all(|c| !c.is_wild())
    }

    /// Appends literal chunks parsed from `suffix` (e.g. `"a/b"`).
    pub fn join(&self, suffix: &str) -> Result<KeyExpr, KeyError> {
        parse_key_expr(&format!("{}/{}", self.text, suffix.trim_start_matches('/')))
    }

    pub fn matches(&self, path: &KeyExpr) -> Result<bool, KeyError> {
        key_matches(self, path)
    }

    pub fn intersects(&self, other: &KeyExpr) -> bool {
        key_intersects(self, other)
    }
}

impl fmt::Display for KeyExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl fmt::Debug for KeyExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyExpr({})", self.text)
    }
}

impl FromStr for KeyExpr {
    type Err = KeyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_key_expr(s)
    }
}

impl Serialize for KeyExpr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for KeyExpr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_key_expr(&s).map_err(serde::de::Error::custom)
    }
}

fn check_literal(s: &str, idx: usize) -> Result<(), KeyError> {
    if s.is_empty() {
        return Err(KeyError::EmptyChunk(idx));
    }
    if s.contains('*') {
        return Err(KeyError::InvalidWildcard(s.to_string()));
    }
    if let Some(ch) = s.chars().find(|c| *c == '/' || *c == '?') {
        return Err(KeyError::InvalidCharacter {
            chunk: s.to_string(),
            ch,
        });
    }
    Ok(())
}

pub fn parse_key_expr(text: &str) -> Result<KeyExpr, KeyError> {
    if text.is_empty() {
        return Err(KeyError::EmptyInput);
    }
    let Some(rest) = text.strip_prefix('/') else {
        return Err(KeyError::MissingLeadingSeparator(text.to_string()));
    };
    let mut chunks = Vec::new();
    for (i, raw) in rest.split('/').enumerate() {
        let chunk = match raw {
            "" => return Err(KeyError::EmptyChunk(i)),
            "*" => Chunk::Star,
            "**" => Chunk::DoubleStar,
            lit => {
                check_literal(lit, i)?;
                Chunk::Literal(lit.to_string())
            }
        };
        chunks.push(chunk);
    }
    KeyExpr::from_chunks(chunks)
}

/// True iff the concrete `path` is in the language of `expr`.
pub fn key_matches(expr: &KeyExpr, path: &KeyExpr) -> Result<bool, KeyError> {
    if !path.is_concrete() {
        return Err(KeyError::NonConcretePath(path.text.clone()));
    }
    let pat = &expr.chunks;
    let word = &path.chunks;
    // reach[j]: pattern prefix consumed so far can produce word[..j]
    let mut reach = vec![false; word.len() + 1];
    reach[0] = true;
    for chunk in pat {
        let mut next = vec![false; word.len() + 1];
        match chunk {
            Chunk::DoubleStar => {
                let mut seen = false;
                for j in 0..=word.len() {
                    seen |= reach[j];
                    next[j] = seen;
                }
            }
            Chunk::Star => {
                next[1..=word.len()].copy_from_slice(&reach[..word.len()]);
            }
            Chunk::Literal(lit) => {
                for j in 0..word.len() {
                    next[j + 1] = reach[j] && matches!(&word[j], Chunk::Literal(w) if w == lit);
                }
            }
        }
        reach = next;
        if !reach.iter().any(|r| *r) {
            return Ok(false);
        }
    }
    Ok(reach[word.len()])
}

/// True iff some concrete path matches both expressions.
pub fn key_intersects(a: &KeyExpr, b: &KeyExpr) -> bool {
    let (x, y) = (&a.chunks, &b.chunks);
    let (n, m) = (x.len(), y.len());
    // ok[i][j]: suffixes x[i..] and y[j..] share a word
    let mut ok = vec![vec![false; m + 1]; n + 1];
    ok[n][m] = true;
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            if i == n && j == m {
                continue;
            }
            let v = if i < n && x[i] == Chunk::DoubleStar {
                ok[i + 1][j] || (j < m && ok[i][j + 1])
            } else if j < m && y[j] == Chunk::DoubleStar {
                ok[i][j + 1] || (i < n && ok[i + 1][j])
            } else if i < n && j < m {
                let compatible = match (&x[i], &y[j]) {
                    (Chunk::Literal(p), Chunk::Literal(q)) => p == q,
                    _ => true,
                };
                compatible && ok[i + 1][j + 1]
            } else {
                false
            };
            ok[i][j] = v;
        }
    }
    ok[0][0]
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Selector {
    pub key: KeyExpr,
    pub properties: Vec<(String, String)>,
}

impl Selector {
    pub fn new(key: KeyExpr) -> Self {
        Selector {
            key,
            properties: Vec::new(),
        }
    }

    pub fn property(&self, name: &str) -> Option<&str> {
        self.properties
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key.as_str())?;
        if !self.properties.is_empty() {
            f.write_str("?(")?;
            for (i, (k, v)) in self.properties.iter().enumerate() {
                if i > 0 {
                    f.write_str(";")?;
                }
                write!(f, "{k}={v}")?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Selector({self})")
    }
}

impl FromStr for Selector {
    type Err = KeyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_selector(s)
    }
}

impl Serialize for Selector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_selector(&s).map_err(serde::de::Error::custom)
    }
}

pub fn parse_selector(text: &str) -> Result<Selector, KeyError> {
    let (key_text, pred) = match text.split_once('?') {
        Some((k, p)) => (k, Some(p)),
        None => (text, None),
    };
    let key = parse_key_expr(key_text)?;
    let Some(pred) = pred else {
        return Ok(Selector::new(key));
    };
    let inner = pred
        .strip_prefix('(')
        .and_then(|p| p.strip_suffix(')'))
        .ok_or_else(|| KeyError::MalformedPredicate(format!("expected (..) in {pred:?}")))?;
    if inner.is_empty() {
        return Err(KeyError::MalformedPredicate("empty predicate".into()));
    }
    let mut properties: Vec<(String, String)> = Vec::new();
    for pair in inner.split(';') {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| KeyError::MalformedPredicate(format!("missing '=' in {pair:?}")))?;
        if k.is_empty() || k.contains(['(', ')', '?']) {
            return Err(KeyError::MalformedPredicate(format!("bad name {k:?}")));
        }
        if v.contains(['(', ')']) {
            return Err(KeyError::MalformedPredicate(format!("bad value {v:?}")));
        }
        if properties.iter().any(|(n, _)| n == k) {
            return Err(KeyError::MalformedPredicate(format!(
                "duplicate name {k:?}"
            )));
        }
        properties.push((k.to_string(), v.to_string()));
    }
    Ok(Selector { key, properties })
}
