//! Link-state database and equal-cost shortest-path routing.
//!
//! Transit rules: a CLIENT never forwards third-party traffic, a PEER forwards
//! only onto links towards PEER or ROUTER neighbours, a ROUTER forwards
//! anywhere. A node's own traffic may leave over any link.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::{NodeId, NodeMode};

/// One node's advertisement of its live adjacencies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lsa {
    pub origin: NodeId,
    pub seq: u64,
    pub mode: NodeMode,
    pub adjacencies: Vec<(NodeId, u64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkStateDb {
    lsas: BTreeMap<NodeId, Lsa>,
}

impl LinkStateDb {
    /// Installs `lsa` if it is newer than what is held. Returns true on change.
    pub fn install(&mut self, lsa: Lsa) -> bool {
        match self.lsas.get(&lsa.origin) {
            Some(cur) if cur.seq >= lsa.seq => false,
            _ => {
                self.lsas.insert(lsa.origin, lsa);
                true
            }
        }
    }

    pub fn get(&self, origin: NodeId) -> Option<&Lsa> {
        self.lsas.get(&origin)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Lsa> {
        self.lsas.values()
    }

    pub fn mode(&self, node: NodeId) -> Option<NodeMode> {
        self.lsas.get(&node).map(|l| l.mode)
    }

    /// Edges advertised by both endpoints.
    pub fn two_way_neighbors(&self, node: NodeId) -> Vec<(NodeId, u64)> {
        let Some(lsa) = self.lsas.get(&node) else {
            return Vec::new();
        };
        lsa.adjacencies
            .iter()
            .filter(|(nb, _)| {
                self.lsas
                    .get(nb)
                    .is_some_and(|o| o.adjacencies.iter().any(|(x, _)| *x == node))
            })
            .copied()
            .collect()
    }
}

pub fn can_transit(via: NodeMode, next: NodeMode) -> bool {
    match via {
        NodeMode::Router => true,
        NodeMode::Peer => next != NodeMode::Client,
        NodeMode::Client => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteEntry {
    /// Cost of the best path for traffic this node originates.
    pub cost: u64,
    /// Equal-cost next hops for locally originated traffic, ascending.
    pub source_hops: Vec<NodeId>,
    /// Cost when this node relays third-party traffic, if it may.
    pub transit_cost: Option<u64>,
    pub transit_hops: Vec<NodeId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoutingTable {
    pub owner: NodeId,
    pub entries: BTreeMap<NodeId, RouteEntry>,
}

impl RoutingTable {
    pub fn get(&self, dst: NodeId) -> Option<&RouteEntry> {
        self.entries.get(&dst)
    }
}

/// Distances from every node to `dst` when each hop after the first must obey the transit rules.
fn transit_distances(db: &LinkStateDb, dst: NodeId) -> BTreeMap<NodeId, u64> {
    let mut dist: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    dist.insert(dst, 0);
    heap.push(Reverse((0u64, dst)));
    while let Some(Reverse((d, v))) = heap.pop() {
        if dist.get(&v).is_some_and(|best| d > *best) {
            continue;
        }
        let Some(v_mode) = db.mode(v) else { continue };
        for (u, w) in db.two_way_neighbors(v) {
            if u == dst {
                continue;
            }
            let Some(u_mode) = db.mode(u) else { continue };
            if !can_transit(u_mode, v_mode) {
                continue;
            }
            let nd = d + w;
            if dist.get(&u).is_none_or(|cur| nd < *cur) {
                dist.insert(u, nd);
                heap.push(Reverse((nd, u)));
            }
        }
    }
    dist
}

/// All-destination routing table for `owner` from its view of the database.
pub fn compute_routes(db: &LinkStateDb, owner: NodeId) -> RoutingTable {
    let mut table = RoutingTable {
        owner,
        entries: BTreeMap::new(),
    };
    let Some(owner_mode) = db.mode(owner) else {
        return table;
    };
    let neighbors = db.two_way_neighbors(owner);
    let dsts: Vec<NodeId> = db
        .iter()
        .map(|l| l.origin)
        .filter(|d| *d != owner)
        .collect();
    for dst in dsts {
        let dist = transit_distances(db, dst);
        let mut best: Option<u64> = None;
        let mut source_hops = Vec::new();
        let mut transit_best: Option<u64> = None;
        let mut transit_hops = Vec::new();
        for &(nb, w) in &neighbors {
            let Some(rest) = dist.get(&nb) else { continue };
            let c = w + rest;
            match best {
                Some(b) if c > b => {}
                Some(b) if c == b => source_hops.push(nb),
                _ => {
                    best = Some(c);
                    source_hops = vec![nb];
                }
            }
            let nb_mode = db.mode(nb).unwrap_or(NodeMode::Client);
            if can_transit(owner_mode, nb_mode) {
                match transit_best {
                    Some(b) if c > b => {}
                    Some(b) if c == b => transit_hops.push(nb),
                    _ => {
                        transit_best = Some(c);
                        transit_hops = vec![nb];
                    }
                }
            }
        }
        if let Some(cost) = best {
            source_hops.sort();
            transit_hops.sort();
            table.entries.insert(
                dst,
                RouteEntry {
                    cost,
                    source_hops,
                    transit_cost: transit_best,
                    transit_hops,
                },
            );
        }
    }
    table
}
