use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::NodeId;
use crate::keyspace::{key_intersects, key_matches, KeyExpr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DeclKind {
    Sub,
    Storage,
    Eval,
}

impl DeclKind {
    pub fn name(self) -> &'static str {
        match self {
            DeclKind::Sub => "SUB",
            DeclKind::Storage => "STORAGE",
            DeclKind::Eval => "EVAL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeclId {
    pub origin: NodeId,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Declaration {
    pub kind: DeclKind,
    pub expr: KeyExpr,
}

/// A versioned add or withdrawal, as flooded between nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclUpdate {
    pub id: DeclId,
    pub version: u64,
    pub decl: Option<Declaration>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InterestTable {
    entries: BTreeMap<DeclId, (u64, Option<Declaration>)>,
}

impl InterestTable {
    /// Applies `u` if it is newer than the held version. Returns true on change.
    pub fn apply(&mut self, u: &DeclUpdate) -> bool {
        match self.entries.get(&u.id) {
            Some((v, _)) if *v >= u.version => false,
            _ => {
                self.entries.insert(u.id, (u.version, u.decl.clone()));
                true
            }
        }
    }

    pub fn updates(&self) -> impl Iterator<Item = DeclUpdate> + '_ {
        self.entries.iter().map(|(id, (version, decl))| DeclUpdate {
            id: *id,
            version: *version,
            decl: decl.clone(),
        })
    }

    pub fn live(&self) -> impl Iterator<Item = (DeclId, &Declaration)> {
        self.entries
            .iter()
            .filter_map(|(id, (_, d))| d.as_ref().map(|d| (*id, d)))
    }

    pub fn len(&self) -> usize {
        self.live().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Origins holding a live declaration of one of `kinds` that matches the concrete `path`.
    pub fn origins_matching(&self, path: &KeyExpr, kinds: &[DeclKind]) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .live()
            .filter(|(_, d)| kinds.contains(&d.kind) && key_matches(&d.expr, path).unwrap_or(false))
            .map(|(id, _)| id.origin)
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn origins_intersecting(&self, expr: &KeyExpr, kinds: &[DeclKind]) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .live()
            .filter(|(_, d)| kinds.contains(&d.kind) && key_intersects(&d.expr, expr))
            .map(|(id, _)| id.origin)
            .collect();
        out.sort();
        out.dedup();
        out
    }
}
