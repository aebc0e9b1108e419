//! Workspaces over the simulated WAN: put/delete, subscriptions, storages,
//! evals and consolidated get.
//!
//! Puts travel once per distinct remote node holding a matching subscription
//! or storage, as learned from that node's flooded declarations. Queries go
//! directly to every node declaring an intersecting storage or eval; each
//! answers with a single response carrying all of its replies.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infomodel::{SchemaRegistry, Violation};
use crate::keyspace::{key_intersects, key_matches, KeyExpr, Selector};
use crate::netsim::{DeclId, DeclKind, MsgId, NetError, NetEvent, NodeId, Sim};
use crate::valuecodec::Value;

pub const CH_FABRIC: u16 = 1;
/// Timer tokens carry their owning layer in the top byte.
pub const TIMER_LAYER_SHIFT: u32 = 56;
pub const TIMER_LAYER_FABRIC: u64 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FabricError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown workspace {0}")]
    UnknownWorkspace(u32),
    #[error("{0} is not a concrete key")]
    NonConcreteKey(KeyExpr),
    #[error("{key} failed validation: {}", violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    ValidationFailed {
        key: KeyExpr,
        violations: Vec<Violation>,
    },
    #[error("history depth must be at least 1, got {0}")]
    InvalidDepth(usize),
    #[error("unknown subscription {0:?}")]
    UnknownSubscription(SubscriptionId),
    #[error("query incomplete: {} responder(s) unreachable", missing.len())]
    Timeout {
        partial: Vec<Reply>,
        missing: Vec<NodeId>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Hybrid logical clock reading; ordered by physical, logical, then node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Timestamp {
    pub physical_ms: u64,
    pub logical: u64,
    pub node: NodeId,
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.physical_ms, self.logical, self.node.0)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Hlc {
    physical: u64,
    logical: u64,
}

impl Hlc {
    fn tick(&mut self, now: u64, node: NodeId) -> Timestamp {
        if now > self.physical {
            self.physical = now;
            self.logical = 0;
        } else {
            self.logical += 1;
        }
        self.stamp(node)
    }

    fn observe(&mut self, now: u64, remote: Timestamp) {
        let l = self.physical.max(remote.physical_ms).max(now);
        let c = if l == self.physical && l == remote.physical_ms {
            self.logical.max(remote.logical) + 1
        } else if l == self.physical {
            self.logical + 1
        } else if l == remote.physical_ms {
            remote.logical + 1
        } else {
            0
        };
        self.physical = l;
        self.logical = c;
    }

    fn stamp(&self, node: NodeId) -> Timestamp {
        Timestamp {
            physical_ms: self.physical,
            logical: self.logical,
            node,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleKind {
    Put,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub key: KeyExpr,
    pub value: Value,
    pub ts: Timestamp,
    pub kind: SampleKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReplyOrigin {
    Storage,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reply {
    pub key: KeyExpr,
    pub value: Value,
    pub ts: Timestamp,
    pub origin: ReplyOrigin,
}

/// One reply per key: EVAL over STORAGE, then the latest timestamp. Sorted by key.
pub fn consolidate_replies(replies: Vec<Reply>) -> Vec<Reply> {
    let mut best: BTreeMap<String, Reply> = BTreeMap::new();
    for r in replies {
        let rank = |x: &Reply| (x.origin == ReplyOrigin::Eval, x.ts);
        match best.get(r.key.as_str()) {
            Some(cur) if rank(cur) >= rank(&r) => {}
            _ => {
                best.insert(r.key.as_str().to_string(), r);
            }
        }
    }
    best.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Workspace {
    id: u32,
    node: NodeId,
}

impl Workspace {
    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn id(&self) -> u32 {
        self.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubscriptionId(pub u64);
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StorageId(pub u64);
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EvalId(pub u64);
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueryId(pub u64);

/// Where a subscription's samples go.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sink {
    /// Held until drained with [`Fabric::take_samples`].
    Queue,
    /// Emitted as [`FabricEvent::Sample`] carrying the token.
    Notify(u64),
}

pub type EvalHandler = Box<dyn FnMut(&KeyExpr, &[(String, String)]) -> Value>;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GetResult {
    pub replies: Vec<Reply>,
    pub truncated: bool,
    pub missing: Vec<NodeId>,
}

impl GetResult {
    pub fn into_result(self) -> Result<Vec<Reply>, FabricError> {
        if self.truncated {
            Err(FabricError::Timeout {
                partial: self.replies,
                missing: self.missing,
            })
        } else {
            Ok(self.replies)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FabricEvent {
    Sample {
        sub: SubscriptionId,
        token: u64,
        sample: Sample,
    },
    QueryDone {
        query: QueryId,
        result: GetResult,
    },
    /// Simulator output not addressed to the fabric.
    Net(NetEvent),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FabricStats {
    pub puts: u64,
    pub deletes: u64,
    pub push_messages: u64,
    pub deliveries: u64,
    pub stored: u64,
    pub queries: u64,
    pub eval_invocations: u64,
    pub truncated_queries: u64,
    pub rejected_puts: u64,
}

#[derive(Debug, Clone)]
pub struct FabricConfig {
    /// Backstop for queries whose responder vanished after receiving the query.
    pub query_timeout_ms: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            query_timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
enum FabMsg {
    Push(Sample),
    Query { qid: u64, sel: Selector },
    Response { qid: u64, replies: Vec<Reply> },
}

struct SubState {
    ws: u32,
    node: NodeId,
    expr: KeyExpr,
    sink: Sink,
    queue: VecDeque<Sample>,
    decl: DeclId,
}

struct StorageState {
    ws: u32,
    node: NodeId,
    scope: KeyExpr,
    depth: usize,
    // per key, ascending by timestamp, at most `depth` entries
    table: BTreeMap<String, Vec<Sample>>,
    decl: DeclId,
}

struct EvalState {
    ws: u32,
    node: NodeId,
    scope: KeyExpr,
    handler: EvalHandler,
    decl: DeclId,
}

struct QueryState {
    node: NodeId,
    replies: Vec<Reply>,
    waiting: BTreeSet<NodeId>,
    missing: Vec<NodeId>,
}

pub struct Fabric {
    sim: Sim,
    config: FabricConfig,
    registry: SchemaRegistry,
    clocks: BTreeMap<NodeId, Hlc>,
    workspaces: BTreeMap<u32, NodeId>,
    subs: BTreeMap<SubscriptionId, SubState>,
    storages: BTreeMap<StorageId, StorageState>,
    evals: BTreeMap<EvalId, EvalState>,
    queries: BTreeMap<QueryId, QueryState>,
    query_msgs: BTreeMap<MsgId, (QueryId, NodeId)>,
    next_id: u64,
    backlog: Vec<FabricEvent>,
    stats: FabricStats,
}

impl fmt::Debug for Fabric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fabric")
            .field("sim", &self.sim)
            .field("workspaces", &self.workspaces.len())
            .field("subscriptions", &self.subs.len())
            .field("storages", &self.storages.len())
            .field("evals", &self.evals.len())
            .finish()
    }
}

impl Fabric {
    pub fn new(sim: Sim) -> Self {
        Fabric::with_config(sim, FabricConfig::default())
    }

    pub fn with_config(sim: Sim, config: FabricConfig) -> Self {
        Fabric {
            sim,
            config,
            registry: SchemaRegistry::new(),
            clocks: BTreeMap::new(),
            workspaces: BTreeMap::new(),
            subs: BTreeMap::new(),
            storages: BTreeMap::new(),
            evals: BTreeMap::new(),
            queries: BTreeMap::new(),
            query_msgs: BTreeMap::new(),
            next_id: 0,
            backlog: Vec::new(),
            stats: FabricStats::default(),
        }
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Sim {
        &mut self.sim
    }

    pub fn into_sim(self) -> Sim {
        self.sim
    }

    pub fn registry(&self) -> &SchemaRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut SchemaRegistry {
        &mut self.registry
    }

    pub fn stats(&self) -> &FabricStats {
        &self.stats
    }

    pub fn now(&self) -> u64 {
        self.sim.now()
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn trace(&mut self, node: NodeId, event: &str, key: &str, bytes: usize, ts: Option<Timestamp>) {
        let ts = ts.map(|t| t.to_string()).unwrap_or_else(|| "-".to_string());
        let line = format!(
            "FAB {} {} {} {} {} {}",
            self.sim.now(),
            self.sim.name(node),
            event,
            key,
            bytes,
            ts
        );
        self.sim.trace_mut().record(line);
    }

    fn tick(&mut self, node: NodeId) -> Timestamp {
        let now = self.sim.now();
        self.clocks.entry(node).or_default().tick(now, node)
    }

    fn observe(&mut self, node: NodeId, remote: Timestamp) {
        let now = self.sim.now();
        self.clocks.entry(node).or_default().observe(now, remote);
    }

    fn ws_node(&self, ws: Workspace) -> Result<NodeId, FabricError> {
        match self.workspaces.get(&ws.id) {
            Some(n) if *n == ws.node => Ok(*n),
            _ => Err(FabricError::UnknownWorkspace(ws.id)),
        }
    }

    pub fn open_workspace(&mut self, node: NodeId) -> Result<Workspace, FabricError> {
        if !self.sim.has_node(node) {
            return Err(FabricError::UnknownNode(node));
        }
        let id = self.workspaces.len() as u32;
        self.workspaces.insert(id, node);
        Ok(Workspace { id, node })
    }

    /// Live subscriptions, storages and evals declared through `ws`.
    pub fn declarations(&self, ws: Workspace) -> usize {
        self.subs.values().filter(|s| s.ws == ws.id).count()
            + self.storages.values().filter(|s| s.ws == ws.id).count()
            + self.evals.values().filter(|s| s.ws == ws.id).count()
    }

    pub fn put(
        &mut self,
        ws: Workspace,
        path: &KeyExpr,
        value: Value,
    ) -> Result<Timestamp, FabricError> {
        let node = self.ws_node(ws)?;
        if !path.is_concrete() {
            return Err(FabricError::NonConcreteKey(path.clone()));
        }
        let violations = self.registry.validate_sample(path, &value);
        if !violations.is_empty() {
            self.stats.rejected_puts += 1;
            return Err(FabricError::ValidationFailed {
                key: path.clone(),
                violations,
            });
        }
        let ts = self.tick(node);
        self.stats.puts += 1;
        self.publish(
            node,
            Sample {
                key: path.clone(),
                value,
                ts,
                kind: SampleKind::Put,
            },
        );
        Ok(ts)
    }

    pub fn delete(&mut self, ws: Workspace, path: &KeyExpr) -> Result<Timestamp, FabricError> {
        let node = self.ws_node(ws)?;
        if !path.is_concrete() {
            return Err(FabricError::NonConcreteKey(path.clone()));
        }
        let ts = self.tick(node);
        self.stats.deletes += 1;
        self.publish(
            node,
            Sample {
                key: path.clone(),
                value: Value::empty(),
                ts,
                kind: SampleKind::Delete,
            },
        );
        Ok(ts)
    }

    /// A fresh clock reading on the workspace's node.
    pub fn timestamp(&mut self, ws: Workspace) -> Result<Timestamp, FabricError> {
        let node = self.ws_node(ws)?;
        Ok(self.tick(node))
    }

    /// Republishes a sample under its original timestamp, as replication does.
    pub fn put_sample(&mut self, ws: Workspace, sample: Sample) -> Result<(), FabricError> {
        let node = self.ws_node(ws)?;
        if !sample.key.is_concrete() {
            return Err(FabricError::NonConcreteKey(sample.key));
        }
        self.observe(node, sample.ts);
        self.publish(node, sample);
        Ok(())
    }

    fn publish(&mut self, node: NodeId, sample: Sample) {
        let event = match sample.kind {
            SampleKind::Put => "PUT",
            SampleKind::Delete => "DEL",
        };
        self.trace(
            node,
            event,
            sample.key.as_str(),
            sample.value.payload().len(),
            Some(sample.ts),
        );
        let remotes: Vec<NodeId> = self
            .sim
            .interests(node)
            .map(|t| t.origins_matching(&sample.key, &[DeclKind::Sub, DeclKind::Storage]))
            .unwrap_or_default()
            .into_iter()
            .filter(|n| *n != node)
            .collect();
        if !remotes.is_empty() {
            let bytes =
                serde_json::to_vec(&FabMsg::Push(sample.clone())).expect("samples serialize");
            for dst in remotes {
                self.stats.push_messages += 1;
                self.sim
                    .send_reliable(node, dst, CH_FABRIC, bytes.clone())
                    .expect("fabric channel and endpoints are valid");
            }
        }
        self.deliver_local(node, &sample);
    }

    fn deliver_local(&mut self, node: NodeId, sample: &Sample) {
        let subs: Vec<SubscriptionId> = self
            .subs
            .iter()
            .filter(|(_, s)| s.node == node && key_matches(&s.expr, &sample.key).unwrap_or(false))
            .map(|(id, _)| *id)
            .collect();
        for id in subs {
            self.stats.deliveries += 1;
            self.trace(
                node,
                "DELIVER",
                sample.key.as_str(),
                sample.value.payload().len(),
                Some(sample.ts),
            );
            let sub = self.subs.get_mut(&id).expect("listed above");
            match sub.sink {
                Sink::Queue => sub.queue.push_back(sample.clone()),
                Sink::Notify(token) => self.backlog.push(FabricEvent::Sample {
                    sub: id,
                    token,
                    sample: sample.clone(),
                }),
            }
        }
        let stores: Vec<StorageId> = self
            .storages
            .iter()
            .filter(|(_, s)| s.node == node && key_matches(&s.scope, &sample.key).unwrap_or(false))
            .map(|(id, _)| *id)
            .collect();
        for id in stores {
            let st = self.storages.get_mut(&id).expect("listed above");
            let hist = st.table.entry(sample.key.as_str().to_string()).or_default();
            if hist.iter().any(|s| s.ts == sample.ts) {
                continue;
            }
            let pos = hist.partition_point(|s| s.ts < sample.ts);
            hist.insert(pos, sample.clone());
            if hist.len() > st.depth {
                hist.remove(0);
            }
            self.stats.stored += 1;
            self.trace(
                node,
                "STORE",
                sample.key.as_str(),
                sample.value.payload().len(),
                Some(sample.ts),
            );
        }
    }

    pub fn subscribe(
        &mut self,
        ws: Workspace,
        expr: KeyExpr,
        sink: Sink,
    ) -> Result<SubscriptionId, FabricError> {
        let node = self.ws_node(ws)?;
        let decl = self.sim.declare(node, DeclKind::Sub, expr.clone())?;
        let id = SubscriptionId(self.fresh_id());
        self.trace(node, "SUB", expr.as_str(), 0, None);
        self.subs.insert(
            id,
            SubState {
                ws: ws.id,
                node,
                expr,
                sink,
                queue: VecDeque::new(),
                decl,
            },
        );
        Ok(id)
    }

    pub fn unsubscribe(&mut self, id: SubscriptionId) -> Result<(), FabricError> {
        let sub = self
            .subs
            .remove(&id)
            .ok_or(FabricError::UnknownSubscription(id))?;
        // another declaration from the same node may still cover the key space
        self.sim.withdraw(sub.decl)?;
        Ok(())
    }

    pub fn take_samples(&mut self, id: SubscriptionId) -> Result<Vec<Sample>, FabricError> {
        let sub = self
            .subs
            .get_mut(&id)
            .ok_or(FabricError::UnknownSubscription(id))?;
        Ok(sub.queue.drain(..).collect())
    }

    pub fn register_storage(
        &mut self,
        ws: Workspace,
        scope: KeyExpr,
        history_depth: usize,
    ) -> Result<StorageId, FabricError> {
        let node = self.ws_node(ws)?;
        if history_depth < 1 {
            return Err(FabricError::InvalidDepth(history_depth));
        }
        let decl = self.sim.declare(node, DeclKind::Storage, scope.clone())?;
        let id = StorageId(self.fresh_id());
        self.trace(node, "STORAGE", scope.as_str(), 0, None);
        self.storages.insert(
            id,
            StorageState {
                ws: ws.id,
                node,
                scope,
                depth: history_depth,
                table: BTreeMap::new(),
                decl,
            },
        );
        Ok(id)
    }

    pub fn unregister_storage(&mut self, id: StorageId) -> Result<(), FabricError> {
        if let Some(st) = self.storages.remove(&id) {
            self.sim.withdraw(st.decl)?;
        }
        Ok(())
    }

    /// Latest live sample per key; deleted keys are absent.
    pub fn storage_table(&self, id: StorageId) -> BTreeMap<KeyExpr, Sample> {
        self.storages
            .get(&id)
            .map(|st| {
                st.table
                    .values()
                    .filter_map(|h| h.last())
                    .filter(|s| s.kind == SampleKind::Put)
                    .map(|s| (s.key.clone(), s.clone()))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Retained samples for `key`, oldest first, at most the storage depth.
    pub fn storage_history(&self, id: StorageId, key: &KeyExpr) -> Vec<Sample> {
        self.storages
            .get(&id)
            .and_then(|st| st.table.get(key.as_str()))
            .cloned()
            .unwrap_or_default()
    }

    pub fn register_eval(
        &mut self,
        ws: Workspace,
        scope: KeyExpr,
        handler: impl FnMut(&KeyExpr, &[(String, String)]) -> Value + 'static,
    ) -> Result<EvalId, FabricError> {
        let node = self.ws_node(ws)?;
        let decl = self.sim.declare(node, DeclKind::Eval, scope.clone())?;
        let id = EvalId(self.fresh_id());
        self.trace(node, "EVAL_DECL", scope.as_str(), 0, None);
        self.evals.insert(
            id,
            EvalState {
                ws: ws.id,
                node,
                scope,
                handler: Box::new(handler),
                decl,
            },
        );
        Ok(id)
    }

    pub fn unregister_eval(&mut self, id: EvalId) -> Result<(), FabricError> {
        if let Some(ev) = self.evals.remove(&id) {
            self.sim.withdraw(ev.decl)?;
        }
        Ok(())
    }

    /// Starts a query; the result arrives as [`FabricEvent::QueryDone`].
    pub fn get(&mut self, ws: Workspace, sel: &Selector) -> Result<QueryId, FabricError> {
        let node = self.ws_node(ws)?;
        let qid = QueryId(self.fresh_id());
        self.stats.queries += 1;
        self.trace(node, "QUERY", &sel.to_string(), 0, None);
        let responders: Vec<NodeId> = self
            .sim
            .interests(node)
            .map(|t| t.origins_intersecting(&sel.key, &[DeclKind::Storage, DeclKind::Eval]))
            .unwrap_or_default()
            .into_iter()
            .filter(|n| *n != node)
            .collect();
        let local = self.answer(node, sel);
        self.queries.insert(
            qid,
            QueryState {
                node,
                replies: local,
                waiting: responders.iter().copied().collect(),
                missing: Vec::new(),
            },
        );
        if responders.is_empty() {
            self.finish_query(qid);
            return Ok(qid);
        }
        let bytes = serde_json::to_vec(&FabMsg::Query {
            qid: qid.0,
            sel: sel.clone(),
        })
        .expect("queries serialize");
        for dst in responders {
            let msg = self
                .sim
                .send_reliable(node, dst, CH_FABRIC, bytes.clone())?;
            self.query_msgs.insert(msg, (qid, dst));
        }
        let at = self.sim.now() + self.config.query_timeout_ms;
        self.sim
            .schedule_timer(node, at, (TIMER_LAYER_FABRIC << TIMER_LAYER_SHIFT) | qid.0);
        Ok(qid)
    }

    /// Issues a query and runs the simulation until it completes.
    pub fn get_blocking(
        &mut self,
        ws: Workspace,
        sel: &Selector,
    ) -> Result<GetResult, FabricError> {
        let qid = self.get(ws, sel)?;
        loop {
            if let Some(pos) = self
                .backlog
                .iter()
                .position(|e| matches!(e, FabricEvent::QueryDone { query, .. } if *query == qid))
            {
                let FabricEvent::QueryDone { result, .. } = self.backlog.remove(pos) else {
                    unreachable!()
                };
                return Ok(result);
            }
            match self.sim.step_one() {
                Some(evs) => {
                    for ev in evs {
                        self.on_net(ev);
                    }
                }
                None => {
                    // nothing left to wait on
                    self.fail_query(qid);
                }
            }
        }
    }

    fn answer(&mut self, node: NodeId, sel: &Selector) -> Vec<Reply> {
        let mut replies = Vec::new();
        for st in self.storages.values().filter(|s| s.node == node) {
            if !key_intersects(&st.scope, &sel.key) {
                continue;
            }
            for hist in st.table.values() {
                let Some(latest) = hist.last() else { continue };
                if latest.kind == SampleKind::Put
                    && key_matches(&sel.key, &latest.key).unwrap_or(false)
                {
                    replies.push(Reply {
                        key: latest.key.clone(),
                        value: latest.value.clone(),
                        ts: latest.ts,
                        origin: ReplyOrigin::Storage,
                    });
                }
            }
        }
        let evals: Vec<EvalId> = self
            .evals
            .iter()
            .filter(|(_, e)| e.node == node && key_intersects(&e.scope, &sel.key))
            .map(|(id, _)| *id)
            .collect();
        for id in evals {
            let scope = self.evals[&id].scope.clone();
            // the reply needs a concrete key: the query's, else the eval's own scope
            let key = if sel.key.is_concrete() {
                sel.key.clone()
            } else if scope.is_concrete() {
                scope
            } else {
                continue;
            };
            let value =
                (self.evals.get_mut(&id).expect("listed").handler)(&sel.key, &sel.properties);
            self.stats.eval_invocations += 1;
            let ts = self.tick(node);
            self.trace(node, "EVAL", key.as_str(), value.payload().len(), Some(ts));
            replies.push(Reply {
                key,
                value,
                ts,
                origin: ReplyOrigin::Eval,
            });
        }
        replies
    }

    fn finish_query(&mut self, qid: QueryId) {
        let Some(q) = self.queries.remove(&qid) else {
            return;
        };
        self.query_msgs.retain(|_, (id, _)| *id != qid);
        let replies = consolidate_replies(q.replies);
        let truncated = !q.missing.is_empty();
        if truncated {
            self.stats.truncated_queries += 1;
        }
        let label = if truncated {
            "GET_TRUNCATED"
        } else {
            "GET_DONE"
        };
        self.trace(q.node, label, "-", replies.len(), None);
        self.backlog.push(FabricEvent::QueryDone {
            query: qid,
            result: GetResult {
                replies,
                truncated,
                missing: q.missing,
            },
        });
    }

    fn fail_query(&mut self, qid: QueryId) {
        if let Some(q) = self.queries.get_mut(&qid) {
            let waiting: Vec<NodeId> = std::mem::take(&mut q.waiting).into_iter().collect();
            q.missing.extend(waiting);
        }
        self.finish_query(qid);
    }

    fn on_net(&mut self, ev: NetEvent) {
        match ev {
            NetEvent::Delivered {
                src,
                dst,
                channel: CH_FABRIC,
                payload,
                ..
            } => match serde_json::from_slice::<FabMsg>(&payload) {
                Ok(msg) => self.on_message(src, dst, msg),
                Err(e) => debug_assert!(false, "bad fabric message: {e}"),
            },
            NetEvent::Unreachable {
                channel: CH_FABRIC,
                msg,
                ..
            } => {
                if let Some((qid, dst)) = self.query_msgs.remove(&msg) {
                    if let Some(q) = self.queries.get_mut(&qid) {
                        q.waiting.remove(&dst);
                        q.missing.push(dst);
                        if q.waiting.is_empty() {
                            self.finish_query(qid);
                        }
                    }
                }
            }
            NetEvent::Timer { token, .. } if token >> TIMER_LAYER_SHIFT == TIMER_LAYER_FABRIC => {
                let qid = QueryId(token & ((1 << TIMER_LAYER_SHIFT) - 1));
                self.fail_query(qid);
            }
            other => self.backlog.push(FabricEvent::Net(other)),
        }
    }

    fn on_message(&mut self, src: NodeId, me: NodeId, msg: FabMsg) {
        match msg {
            FabMsg::Push(sample) => {
                self.observe(me, sample.ts);
                self.deliver_local(me, &sample);
            }
            FabMsg::Query { qid, sel } => {
                let replies = self.answer(me, &sel);
                for r in &replies {
                    self.observe(me, r.ts);
                }
                let bytes = serde_json::to_vec(&FabMsg::Response { qid, replies })
                    .expect("replies serialize");
                self.sim
                    .send_reliable(me, src, CH_FABRIC, bytes)
                    .expect("fabric channel and endpoints are valid");
            }
            FabMsg::Response { qid, replies } => {
                let qid = QueryId(qid);
                let Some(q) = self.queries.get_mut(&qid) else {
                    return;
                };
                if !q.waiting.remove(&src) {
                    return;
                }
                for r in &replies {
                    self.clocks
                        .entry(me)
                        .or_default()
                        .observe(self.sim.now(), r.ts);
                }
                q.replies.extend(replies);
                if q.waiting.is_empty() {
                    self.finish_query(qid);
                }
            }
        }
    }

    /// Runs the simulation through `t_ms`, returning everything that happened.
    pub fn step_until(&mut self, t_ms: u64) -> Vec<FabricEvent> {
        while self.sim.next_event_time().is_some_and(|t| t <= t_ms) {
            for ev in self.sim.step_one().unwrap_or_default() {
                self.on_net(ev);
            }
        }
        self.sim.advance_to(t_ms);
        std::mem::take(&mut self.backlog)
    }

    /// Processes one simulator event (if any) and returns the resulting events.
    pub fn step_one(&mut self) -> Option<Vec<FabricEvent>> {
        let evs = self.sim.step_one();
        for ev in evs.iter().flatten().cloned() {
            self.on_net(ev);
        }
        if evs.is_none() && self.backlog.is_empty() {
            return None;
        }
        Some(std::mem::take(&mut self.backlog))
    }

    /// Puts events back for the next caller to step the fabric.
    pub fn requeue(&mut self, mut events: Vec<FabricEvent>) {
        events.append(&mut self.backlog);
        self.backlog = events;
    }

    /// Events produced outside the stepping loop, such as local deliveries.
    pub fn drain_events(&mut self) -> Vec<FabricEvent> {
        std::mem::take(&mut self.backlog)
    }

    pub fn run_until_idle(&mut self, limit_ms: u64) -> Vec<FabricEvent> {
        let mut out = std::mem::take(&mut self.backlog);
        while self.sim.next_event_time().is_some_and(|t| t <= limit_ms) {
            for ev in self.sim.step_one().unwrap_or_default() {
                self.on_net(ev);
            }
            out.append(&mut self.backlog);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{LinkParams, NodeMode};
    use std::cell::RefCell;
    use std::rc::Rc;

    fn key(s: &str) -> KeyExpr {
        s.parse().unwrap()
    }

    fn pair() -> (Fabric, Workspace, Workspace) {
        let mut sim = Sim::new(1);
        let a = sim.add_named_node("vehicle", NodeMode::Peer);
        let b = sim.add_named_node("cloud", NodeMode::Router);
        sim.add_link(a, b, LinkParams::new(10, 0.0, 1500).unwrap())
            .unwrap();
        let mut f = Fabric::new(sim);
        let wa = f.open_workspace(a).unwrap();
        let wb = f.open_workspace(b).unwrap();
        (f, wa, wb)
    }

    #[test]
    fn hello_world_push_and_pull() {
        let (mut f, wa, wb) = pair();
        let sub = f.subscribe(wb, key("/demo/**"), Sink::Queue).unwrap();
        let st = f.register_storage(wb, key("/demo/**"), 1).unwrap();
        f.run_until_idle(1_000);
        f.put(wa, &key("/demo/hello"), Value::text("Hello world"))
            .unwrap();
        f.run_until_idle(2_000);
        let got = f.take_samples(sub).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].value.as_text(), Some("Hello world"));
        assert_eq!(f.storage_table(st).len(), 1);
        let res = f.get_blocking(wa, &"/demo/hello".parse().unwrap()).unwrap();
        assert!(!res.truncated);
        assert_eq!(res.replies.len(), 1);
        assert_eq!(res.replies[0].origin, ReplyOrigin::Storage);
        assert_eq!(res.replies[0].value.as_text(), Some("Hello world"));
    }

    #[test]
    fn late_subscriber_sees_nothing() {
        let (mut f, wa, wb) = pair();
        f.put(wa, &key("/demo/hello"), Value::text("x")).unwrap();
        let sub = f.subscribe(wb, key("/demo/**"), Sink::Queue).unwrap();
        f.run_until_idle(1_000);
        assert!(f.take_samples(sub).unwrap().is_empty());
    }

    #[test]
    fn eval_receives_properties() {
        let (mut f, wa, wb) = pair();
        let seen = Rc::new(RefCell::new(Vec::new()));
        let s = seen.clone();
        f.register_eval(wb, key("/demo/hello"), move |_, props| {
            s.borrow_mut().push(props.to_vec());
            let name = props
                .iter()
                .find(|(k, _)| k == "name")
                .map(|(_, v)| v.as_str())
                .unwrap_or("?");
            Value::text(format!("Hello {name}"))
        })
        .unwrap();
        f.run_until_idle(1_000);
        let r = f
            .get_blocking(wa, &"/demo/hello?(name=World)".parse().unwrap())
            .unwrap();
        assert_eq!(r.replies[0].value.as_text(), Some("Hello World"));
        assert_eq!(r.replies[0].origin, ReplyOrigin::Eval);
        assert_eq!(
            *seen.borrow(),
            vec![vec![("name".to_string(), "World".to_string())]]
        );
        f.put(wa, &key("/demo/hello"), Value::text("x")).unwrap();
        f.run_until_idle(5_000);
        assert_eq!(seen.borrow().len(), 1);
    }

    #[test]
    fn workspaces_are_independent() {
        let (mut f, wa, _) = pair();
        let other = f.open_workspace(wa.node()).unwrap();
        f.subscribe(wa, key("/a/**"), Sink::Queue).unwrap();
        assert_eq!((f.declarations(wa), f.declarations(other)), (1, 0));
        assert_eq!(
            f.open_workspace(NodeId(42)),
            Err(FabricError::UnknownNode(NodeId(42)))
        );
    }

    #[test]
    fn put_errors() {
        let (mut f, wa, wb) = pair();
        assert!(matches!(
            f.put(wa, &key("/a/*"), Value::text("x")),
            Err(FabricError::NonConcreteKey(_))
        ));
        assert!(matches!(
            f.register_storage(wb, key("/a/**"), 0),
            Err(FabricError::InvalidDepth(0))
        ));
    }

    #[test]
    fn delete_removes_from_storage() {
        let (mut f, wa, wb) = pair();
        let st = f.register_storage(wb, key("/s/**"), 2).unwrap();
        f.run_until_idle(1_000);
        f.put(wa, &key("/s/x"), Value::text("1")).unwrap();
        f.put(wa, &key("/s/x"), Value::text("2")).unwrap();
        f.put(wa, &key("/s/x"), Value::text("3")).unwrap();
        f.run_until_idle(2_000);
        let hist = f.storage_history(st, &key("/s/x"));
        assert_eq!(
            hist.iter()
                .map(|s| s.value.as_text().unwrap())
                .collect::<Vec<_>>(),
            ["2", "3"]
        );
        f.delete(wa, &key("/s/x")).unwrap();
        f.run_until_idle(3_000);
        assert!(f.storage_table(st).is_empty());
    }

    #[test]
    fn consolidation_rules() {
        let ts = |p| Timestamp {
            physical_ms: p,
            logical: 0,
            node: NodeId(0),
        };
        let r = |k: &str, p, origin| Reply {
            key: key(k),
            value: Value::text(format!("{p}")),
            ts: ts(p),
            origin,
        };
        let out = consolidate_replies(vec![
            r("/b", 5, ReplyOrigin::Storage),
            r("/b", 9, ReplyOrigin::Storage),
            r("/a", 50, ReplyOrigin::Storage),
            r("/a", 1, ReplyOrigin::Eval),
        ]);
        assert_eq!(out.len(), 2);
        assert_eq!(
            (out[0].key.as_str(), out[0].origin),
            ("/a", ReplyOrigin::Eval)
        );
        assert_eq!(out[1].ts, ts(9));
    }

    #[test]
    fn hlc_rules() {
        let n = NodeId(1);
        let mut c = Hlc::default();
        let a = c.tick(10, n);
        let b = c.tick(10, n);
        assert!(b > a);
        c.observe(
            5,
            Timestamp {
                physical_ms: 20,
                logical: 3,
                node: NodeId(2),
            },
        );
        let d = c.tick(12, n);
        assert_eq!((d.physical_ms, d.logical), (20, 5));
    }
}
