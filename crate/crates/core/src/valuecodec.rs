//! Tagged values and the transcoding matrix.
//!
//! Canonical serializations, byte-exact:
//!
//! * `RAW`: any bytes.
//! * `TEXT`: UTF-8.
//! * `PROPERTIES`: `name=value` pairs joined by `;`, sorted by name. Names are
//!   non-empty and contain neither `=` nor `;`; values contain no `;`. The
//!   empty payload is the empty property set.
//! * `TREE`: compact JSON restricted to objects, arrays and strings; object
//!   keys sorted.
//! * `RELATIONAL`: a header row then data rows, rows separated by `\n` (no
//!   trailing newline), cells by `,`. Column names are non-empty and
//!   distinct; columns are stored name-sorted. Cells contain neither `,` nor
//!   `\n`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EncodingTag {
    Raw,
    Text,
    Properties,
    Tree,
    Relational,
}

impl EncodingTag {
    pub const ALL: [EncodingTag; 5] = [
        EncodingTag::Raw,
        EncodingTag::Text,
        EncodingTag::Properties,
        EncodingTag::Tree,
        EncodingTag::Relational,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EncodingTag::Raw => "RAW",
            EncodingTag::Text => "TEXT",
            EncodingTag::Properties => "PROPERTIES",
            EncodingTag::Tree => "TREE",
            EncodingTag::Relational => "RELATIONAL",
        }
    }
}

impl fmt::Display for EncodingTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncodingTag {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EncodingTag::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CodecError::UnknownTag(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("payload violates {tag} encoding: {reason}")]
    PayloadViolatesEncoding { tag: EncodingTag, reason: String },
    #[error("no transcoding from {from} to {to}")]
    UnsupportedTranscoding { from: EncodingTag, to: EncodingTag },
    #[error("{from} value cannot be represented as {to}: {reason}")]
    LossyStructure {
        from: EncodingTag,
        to: EncodingTag,
        reason: String,
    },
    #[error("unknown encoding tag {0:?}")]
    UnknownTag(String),
}

/// Tree of string-keyed maps, lists and strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tree {
    Str(String),
    List(Vec<Tree>),
    Map(BTreeMap<String, Tree>),
}

impl Tree {
    fn from_json(v: serde_json::Value) -> Result<Tree, String> {
        match v {
            serde_json::Value::String(s) => Ok(Tree::Str(s)),
            serde_json::Value::Array(items) => items
                .into_iter()
                .map(Tree::from_json)
                .collect::<Result<_, _>>()
                .map(Tree::List),
            serde_json::Value::Object(map) => map
                .into_iter()
                .map(|(k, v)| Tree::from_json(v).map(|t| (k, t)))
                .collect::<Result<_, _>>()
                .map(Tree::Map),
            other => Err(format!("unsupported JSON node {other}")),
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            Tree::Str(s) => serde_json::Value::String(s.clone()),
            Tree::List(items) => {
                serde_json::Value::Array(items.iter().map(Tree::to_json).collect())
            }
            Tree::Map(map) => serde_json::Value::Object(
                map.iter().map(|(k, v)| (k.clone(), v.to_json())).collect(),
            ),
        }
    }

    pub fn to_canonical(&self) -> Vec<u8> {
        // serde_json maps are BTreeMap-backed, so keys come out sorted.
        serde_json::to_vec(&self.to_json()).expect("tree serialization is infallible")
    }

    /// Flat map of strings, if this tree is one.
    pub fn as_flat_map(&self) -> Option<BTreeMap<&str, &str>> {
        let Tree::Map(map) = self else { return None };
        map.iter()
            .map(|(k, v)| match v {
                Tree::Str(s) => Some((k.as_str(), s.as_str())),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Value {
    tag: EncodingTag,
    payload: Vec<u8>,
}

impl Value {
    pub fn tag(&self) -> EncodingTag {
        self.tag
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn empty() -> Value {
        Value {
            tag: EncodingTag::Raw,
            payload: Vec::new(),
        }
    }

    pub fn raw(bytes: impl Into<Vec<u8>>) -> Value {
        Value {
            tag: EncodingTag::Raw,
            payload: bytes.into(),
        }
    }

    pub fn text(s: impl Into<String>) -> Value {
        Value {
            tag: EncodingTag::Text,
            payload: s.into().into_bytes(),
        }
    }

    pub fn from_tree(tree: &Tree) -> Value {
        Value {
            tag: EncodingTag::Tree,
            payload: tree.to_canonical(),
        }
    }

    pub fn from_properties<K: AsRef<str>, V: AsRef<str>>(
        pairs: &[(K, V)],
    ) -> Result<Value, CodecError> {
        let joined = pairs
            .iter()
            .map(|(k, v)| format!("{}={}", k.as_ref(), v.as_ref()))
            .collect::<Vec<_>>()
            .join(";");
        make_value(EncodingTag::Properties, joined.into_bytes())
    }

    pub fn as_text(&self) -> Option<&str> {
        match self.tag {
            EncodingTag::Text => std::str::from_utf8(&self.payload).ok(),
            _ => None,
        }
    }

    pub fn as_properties(&self) -> Option<Vec<(String, String)>> {
        match self.tag {
            EncodingTag::Properties => parse_properties(&self.payload).ok(),
            _ => None,
        }
    }

    pub fn as_tree(&self) -> Option<Tree> {
        match self.tag {
            EncodingTag::Tree => parse_tree(&self.payload).ok(),
            _ => None,
        }
    }

    pub fn as_relation(&self) -> Option<Relation> {
        match self.tag {
            EncodingTag::Relational => parse_relation(&self.payload).ok(),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.payload) {
            Ok(s) if self.tag != EncodingTag::Raw => write!(f, "{}:{s}", self.tag),
            _ => write!(f, "{}:{} bytes", self.tag, self.payload.len()),
        }
    }
}

/// Header plus uniform rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Relation {
    fn to_canonical(&self) -> Vec<u8> {
        let mut order: Vec<usize> = (0..self.columns.len()).collect();
        order.sort_by(|a, b| self.columns[*a].cmp(&self.columns[*b]));
        let mut lines = Vec::with_capacity(self.rows.len() + 1);
        lines.push(
            order
                .iter()
                .map(|i| self.columns[*i].as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        for row in &self.rows {
            lines.push(
                order
                    .iter()
                    .map(|i| row[*i].as_str())
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        lines.join("\n").into_bytes()
    }
}

fn violation(tag: EncodingTag, reason: impl Into<String>) -> CodecError {
    CodecError::PayloadViolatesEncoding {
        tag,
        reason: reason.into(),
    }
}

fn utf8(tag: EncodingTag, bytes: &[u8]) -> Result<&str, CodecError> {
    std::str::from_utf8(bytes).map_err(|e| violation(tag, e.to_string()))
}

fn parse_properties(bytes: &[u8]) -> Result<Vec<(String, String)>, CodecError> {
    let tag = EncodingTag::Properties;
    let text = utf8(tag, bytes)?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    for pair in text.split(';') {
        if pair.is_empty() {
            return Err(violation(tag, "empty pair"));
        }
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| violation(tag, format!("pair {pair:?} has no '='")))?;
        if k.is_empty() {
            return Err(violation(tag, format!("pair {pair:?} has an empty name")));
        }
        if pairs.iter().any(|(n, _)| n == k) {
            return Err(violation(tag, format!("duplicate name {k:?}")));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    pairs.sort();
    Ok(pairs)
}

fn render_properties(pairs: &[(String, String)]) -> Vec<u8> {
    pairs
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
        .into_bytes()
}

fn parse_tree(bytes: &[u8]) -> Result<Tree, CodecError> {
    let json: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| violation(EncodingTag::Tree, e.to_string()))?;
    Tree::from_json(json).map_err(|e| violation(EncodingTag::Tree, e))
}

fn parse_relation(bytes: &[u8]) -> Result<Relation, CodecError> {
    let tag = EncodingTag::Relational;
    let text = utf8(tag, bytes)?;
    if text.is_empty() {
        return Err(violation(tag, "missing header row"));
    }
    let mut lines = text.split('\n');
    let columns: Vec<String> = lines
        .next()
        .unwrap_or_default()
        .split(',')
        .map(str::to_string)
        .collect();
    if columns.iter().any(String::is_empty) {
        return Err(violation(tag, "empty column name"));
    }
    for (i, c) in columns.iter().enumerate() {
        if columns[..i].contains(c) {
            return Err(violation(tag, format!("duplicate column {c:?}")));
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != columns.len() {
            return Err(violation(
                tag,
                format!(
                    "row {} has {} cells, expected {}",
                    n + 1,
                    row.len(),
                    columns.len()
                ),
            ));
        }
        rows.push(row);
    }
    Ok(Relation { columns, rows })
}

/// Validates `payload` against the grammar of `tag` and stores its canonical form.
pub fn make_value(tag: EncodingTag, payload: impl Into<Vec<u8>>) -> Result<Value, CodecError> {
    let payload = payload.into();
    let payload = match tag {
        EncodingTag::Raw => payload,
        EncodingTag::Text => {
            utf8(tag, &payload)?;
            payload
        }
        EncodingTag::Properties => render_properties(&parse_properties(&payload)?),
        EncodingTag::Tree => parse_tree(&payload)?.to_canonical(),
        EncodingTag::Relational => parse_relation(&payload)?.to_canonical(),
    };
    Ok(Value { tag, payload })
}

pub fn transcode_support(from: EncodingTag, to: EncodingTag) -> bool {
    use EncodingTag::{Properties, Raw, Relational, Text};
    from == to
        || to == Raw
        || matches!(
            (from, to),
            (Raw, Text)
                | (Properties, EncodingTag::Tree)
                | (EncodingTag::Tree, Properties)
                | (Relational, EncodingTag::Tree)
                | (EncodingTag::Tree, Relational)
        )
}

fn lossy(from: EncodingTag, to: EncodingTag, reason: impl Into<String>) -> CodecError {
    CodecError::LossyStructure {
        from,
        to,
        reason: reason.into(),
    }
}

pub fn transcode(v: &Value, target: EncodingTag) -> Result<Value, CodecError> {
    use EncodingTag::{Properties, Raw, Relational, Text};
    let from = v.tag;
    if !transcode_support(from, target) {
        return Err(CodecError::UnsupportedTranscoding { from, to: target });
    }
    if from == target {
        return Ok(v.clone());
    }
    match (from, target) {
        (_, Raw) => Ok(Value::raw(v.payload.clone())),
        (Raw, Text) => make_value(Text, v.payload.clone()),
        (Properties, EncodingTag::Tree) => {
            let pairs = parse_properties(&v.payload)?;
            let map = pairs.into_iter().map(|(k, v)| (k, Tree::Str(v))).collect();
            Ok(Value::from_tree(&Tree::Map(map)))
        }
        (EncodingTag::Tree, Properties) => {
            let tree = parse_tree(&v.payload)?;
            let flat = tree
                .as_flat_map()
                .ok_or_else(|| lossy(from, target, "not a flat map of strings"))?;
            let mut pairs = Vec::with_capacity(flat.len());
            for (k, val) in flat {
                if k.is_empty() || k.contains(['=', ';']) || val.contains(';') {
                    return Err(lossy(
                        from,
                        target,
                        format!("entry {k:?} is not representable"),
                    ));
                }
                pairs.push((k.to_string(), val.to_string()));
            }
            Ok(Value {
                tag: Properties,
                payload: render_properties(&pairs),
            })
        }
        (Relational, EncodingTag::Tree) => {
            let rel = parse_relation(&v.payload)?;
            if rel.rows.is_empty() {
                return Err(lossy(
                    from,
                    target,
                    "a relation without rows loses its header",
                ));
            }
            let items = rel
                .rows
                .iter()
                .map(|row| {
                    Tree::Map(
                        rel.columns
                            .iter()
                            .cloned()
                            .zip(row.iter().cloned().map(Tree::Str))
                            .collect(),
                    )
                })
                .collect();
            Ok(Value::from_tree(&Tree::List(items)))
        }
        (EncodingTag::Tree, Relational) => {
            let tree = parse_tree(&v.payload)?;
            let Tree::List(items) = &tree else {
                return Err(lossy(from, target, "not a list"));
            };
            let mut columns: Option<Vec<String>> = None;
            let mut rows = Vec::with_capacity(items.len());
            for item in items {
                let flat = item
                    .as_flat_map()
                    .ok_or_else(|| lossy(from, target, "list item is not a flat map of strings"))?;
                let keys: Vec<String> = flat.keys().map(|k| k.to_string()).collect();
                match &columns {
                    None => columns = Some(keys),
                    Some(cols) if *cols != keys => {
                        return Err(lossy(from, target, "records are not uniform"))
                    }
                    Some(_) => {}
                }
                let bad = |s: &str| s.contains([',', '\n']);
                if flat.iter().any(|(k, v)| k.is_empty() || bad(k) || bad(v)) {
                    return Err(lossy(from, target, "cell contains a separator"));
                }
                rows.push(flat.values().map(|v| v.to_string()).collect());
            }
            let columns = columns
                .filter(|c| !c.is_empty())
                .ok_or_else(|| lossy(from, target, "no columns"))?;
            let rel = Relation { columns, rows };
            Ok(Value {
                tag: Relational,
                payload: rel.to_canonical(),
            })
        }
        _ => Err(CodecError::UnsupportedTranscoding { from, to: target }),
    }
}
