//! Deterministic discrete-event WAN.
//!
//! Every link runs a per-direction ARQ (cumulative acks, retransmission after
//! four link latencies) over frames no larger than the link MTU. Routed
//! messages additionally carry an end-to-end sequence number: the source
//! retransmits after four path latencies until acknowledged, and the
//! destination delivers each message once, in send order per
//! `(src, channel)`. Nodes flood link-state advertisements and key-space
//! declarations over the same link channels.

mod frame;
mod interest;
mod routing;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use frame::{fragment_payload, reassemble, FragInfo, Frame, FrameHeader, FrameKind, MIN_MTU};
pub use interest::{DeclId, DeclKind, DeclUpdate, Declaration, InterestTable};
pub use routing::{can_transit, compute_routes, LinkStateDb, Lsa, RouteEntry, RoutingTable};

use crate::keyspace::KeyExpr;
use crate::trace::TraceLog;

/// Channel reserved for link-local control traffic.
pub const CONTROL_CHANNEL: u16 = 0;

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeMode {
    Client,
    Peer,
    Router,
}

impl NodeMode {
    pub fn name(self) -> &'static str {
        match self {
            NodeMode::Client => "CLIENT",
            NodeMode::Peer => "PEER",
            NodeMode::Router => "ROUTER",
        }
    }
}

impl FromStr for NodeMode {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CLIENT" => Ok(NodeMode::Client),
            "PEER" => Ok(NodeMode::Peer),
            "ROUTER" => Ok(NodeMode::Router),
            _ => Err(NetError::UnknownMode(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LinkId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkStatus {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub latency_ms: u64,
    pub loss: f64,
    pub mtu: usize,
}

impl LinkParams {
    pub fn new(latency_ms: u64, loss: f64, mtu: usize) -> Result<Self, NetError> {
        let p = LinkParams {
            latency_ms,
            loss,
            mtu,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.latency_ms == 0 {
            return Err(NetError::InvalidLink("latency must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.loss) {
            return Err(NetError::InvalidLink(format!(
                "loss {} outside [0, 1)",
                self.loss
            )));
        }
        if self.mtu < MIN_MTU {
            return Err(NetError::MtuTooSmall(self.mtu));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MsgId(pub u64);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown link {0:?}")]
    UnknownLink(LinkId),
    #[error("a link between {0} and {1} already exists")]
    DuplicateLink(NodeId, NodeId),
    #[error("invalid link: {0}")]
    InvalidLink(String),
    #[error("mtu {0} below the {MIN_MTU}-byte minimum")]
    MtuTooSmall(usize),
    #[error("payload of {0} bytes is too large")]
    PayloadTooLarge(usize),
    #[error("unknown node mode {0:?}")]
    UnknownMode(String),
    #[error("source and destination are both {0}")]
    SelfSend(NodeId),
    #[error("channel {CONTROL_CHANNEL} is reserved")]
    ReservedChannel,
    #[error("{dst} unreachable from {src}")]
    Unreachable { src: NodeId, dst: NodeId },
    #[error("fragment set incomplete: {have} of {total}")]
    IncompleteFragmentSet { have: usize, total: usize },
    #[error("fragment index {index} out of range for {total}")]
    IndexOutOfRange { index: u32, total: u32 },
    #[error("duplicate fragment {0}")]
    DuplicateFragment(u32),
    #[error("fragments from different messages")]
    MixedFragmentSet,
    #[error("unknown declaration {0:?}")]
    UnknownDeclaration(DeclId),
}

/// What the simulator reports to the layers above it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetEvent {
    Delivered {
        time: u64,
        src: NodeId,
        dst: NodeId,
        channel: u16,
        msg: MsgId,
        payload: Vec<u8>,
    },
    /// The source had no route for `unreachable_timeout_ms` and gave up.
    Unreachable {
        time: u64,
        src: NodeId,
        dst: NodeId,
        channel: u16,
        msg: MsgId,
    },
    Timer {
        time: u64,
        node: NodeId,
        token: u64,
    },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub unreachable_timeout_ms: u64,
    pub max_hops: usize,
    /// Emit one `NET` trace line per frame transmission.
    pub trace_frames: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            unreachable_timeout_ms: 5_000,
            max_hops: 64,
            trace_frames: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NetStats {
    /// Transmissions per frame kind, retransmissions included.
    pub frames_sent: BTreeMap<FrameKind, u64>,
    pub link_acks_sent: u64,
    pub frames_lost: u64,
    pub link_retransmissions: u64,
    pub e2e_retransmissions: u64,
    pub delivered: u64,
    pub duplicates_suppressed: u64,
    pub abandoned: u64,
    pub loop_drops: u64,
    pub no_route_drops: u64,
}

impl NetStats {
    pub fn sent(&self, kind: FrameKind) -> u64 {
        self.frames_sent.get(&kind).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Control {
    Hello {
        mode: NodeMode,
    },
    Lsa(Lsa),
    Decl(DeclUpdate),
    Digest {
        lsas: Vec<Lsa>,
        decls: Vec<DeclUpdate>,
    },
}

impl Control {
    fn kind(&self) -> FrameKind {
        match self {
            Control::Hello { .. } => FrameKind::Hello,
            Control::Lsa(_) => FrameKind::Lsa,
            Control::Decl(_) | Control::Digest { .. } => FrameKind::Digest,
        }
    }
}

#[derive(Debug, Clone)]
enum HopMeta {
    Data {
        msg: MsgId,
        src: NodeId,
        dst: NodeId,
        channel: u16,
        seq: u64,
        /// Lowest sequence number the source still holds; anything below is settled.
        low: u64,
        visited: Vec<NodeId>,
    },
    E2eAck {
        src: NodeId,
        dst: NodeId,
        channel: u16,
        seq: u64,
    },
    Control,
}

#[derive(Debug, Clone)]
enum Wire {
    Frame {
        epoch: u32,
        link_seq: u64,
        frame: Frame,
        meta: Arc<HopMeta>,
    },
    LinkAck {
        epoch: u32,
        cumulative: u64,
    },
}

#[derive(Debug)]
enum Ev {
    Arrive {
        link: LinkId,
        to: NodeId,
        wire: Wire,
    },
    LinkRto {
        link: LinkId,
        side: usize,
        epoch: u32,
        link_seq: u64,
    },
    E2eRto {
        node: NodeId,
        dst: NodeId,
        channel: u16,
        seq: u64,
    },
    Expire {
        node: NodeId,
        dst: NodeId,
        channel: u16,
        seq: u64,
        parked_at: u64,
    },
    Timer {
        node: NodeId,
        token: u64,
    },
}

struct Scheduled {
    time: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

#[derive(Debug, Default)]
struct LinkTx {
    next_seq: u64,
    next_msg: u64,
    unacked: BTreeMap<u64, Wire>,
}

#[derive(Debug, Default)]
struct LinkRx {
    expected: u64,
    buf: BTreeMap<u64, (Frame, Arc<HopMeta>)>,
    partial: Vec<Frame>,
}

#[derive(Debug)]
struct Link {
    a: NodeId,
    b: NodeId,
    params: LinkParams,
    status: LinkStatus,
    epoch: u32,
    // index 0 carries a -> b, index 1 carries b -> a
    tx: [LinkTx; 2],
    rx: [LinkRx; 2],
}

impl Link {
    fn side_of(&self, from: NodeId) -> usize {
        if from == self.a {
            0
        } else {
            1
        }
    }

    fn other(&self, n: NodeId) -> NodeId {
        if n == self.a {
            self.b
        } else {
            self.a
        }
    }

    fn reset(&mut self) {
        self.epoch += 1;
        self.tx = Default::default();
        self.rx = Default::default();
    }
}

#[derive(Debug)]
struct OutMsg {
    msg: MsgId,
    payload: Arc<Vec<u8>>,
    parked_since: Option<u64>,
}

#[derive(Debug, Default)]
struct FlowTx {
    next_seq: u64,
    pending: BTreeMap<u64, OutMsg>,
}

#[derive(Debug, Default)]
struct FlowRx {
    next: u64,
    buf: BTreeMap<u64, (MsgId, Vec<u8>)>,
}

#[derive(Debug)]
struct Node {
    name: String,
    mode: NodeMode,
    lsa_seq: u64,
    lsdb: LinkStateDb,
    routes: RoutingTable,
    interests: InterestTable,
    next_decl: u64,
    links: BTreeMap<NodeId, LinkId>,
    flows_out: BTreeMap<(NodeId, u16), FlowTx>,
    flows_in: BTreeMap<(NodeId, u16), FlowRx>,
    ecmp: BTreeMap<(NodeId, NodeId, u16, bool), u64>,
}

pub struct Sim {
    seed: u64,
    now: u64,
    event_seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    rng: ChaCha8Rng,
    config: SimConfig,
    nodes: Vec<Node>,
    links: Vec<Link>,
    next_msg: u64,
    outbox: Vec<NetEvent>,
    trace: TraceLog,
    stats: NetStats,
}

impl fmt::Debug for Sim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sim")
            .field("now", &self.now)
            .field("nodes", &self.nodes.len())
            .field("links", &self.links.len())
            .field("pending_events", &self.queue.len())
            .finish()
    }
}

pub fn build_sim(seed: u64) -> Sim {
    Sim::new(seed)
}

impl Sim {
    pub fn new(seed: u64) -> Sim {
        Sim::with_config(seed, SimConfig::default())
    }

    pub fn with_config(seed: u64, config: SimConfig) -> Sim {
        Sim {
            seed,
            now: 0,
            event_seq: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            config,
            nodes: Vec::new(),
            links: Vec::new(),
            next_msg: 0,
            outbox: Vec::new(),
            trace: TraceLog::new(false),
            stats: NetStats::default(),
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut TraceLog {
        &mut self.trace
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    pub fn has_node(&self, id: NodeId) -> bool {
        (id.0 as usize) < self.nodes.len()
    }

    fn node(&self, id: NodeId) -> Result<&Node, NetError> {
        self.nodes
            .get(id.0 as usize)
            .ok_or(NetError::UnknownNode(id))
    }

    pub fn name(&self, id: NodeId) -> &str {
        self.nodes
            .get(id.0 as usize)
            .map(|n| n.name.as_str())
            .unwrap_or("?")
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .map(|i| NodeId(i as u32))
    }

    pub fn mode(&self, id: NodeId) -> Option<NodeMode> {
        self.nodes.get(id.0 as usize).map(|n| n.mode)
    }

    pub fn routes(&self, id: NodeId) -> Option<&RoutingTable> {
        self.nodes.get(id.0 as usize).map(|n| &n.routes)
    }

    pub fn lsdb(&self, id: NodeId) -> Option<&LinkStateDb> {
        self.nodes.get(id.0 as usize).map(|n| &n.lsdb)
    }

    pub fn interests(&self, id: NodeId) -> Option<&InterestTable> {
        self.nodes.get(id.0 as usize).map(|n| &n.interests)
    }

    pub fn has_route(&self, src: NodeId, dst: NodeId) -> bool {
        src == dst || self.path_latency(src, dst).is_some()
    }

    /// Cost of `src`'s current best route to `dst`.
    pub fn path_latency(&self, src: NodeId, dst: NodeId) -> Option<u64> {
        if src == dst {
            return Some(0);
        }
        self.routes(src)?.get(dst).map(|e| e.cost)
    }

    pub fn link(&self, id: LinkId) -> Option<(NodeId, NodeId, LinkParams, LinkStatus)> {
        self.links
            .get(id.0 as usize)
            .map(|l| (l.a, l.b, l.params, l.status))
    }

    pub fn link_ids(&self) -> impl Iterator<Item = LinkId> {
        (0..self.links.len() as u32).map(LinkId)
    }

    pub fn link_between(&self, a: NodeId, b: NodeId) -> Option<LinkId> {
        self.nodes.get(a.0 as usize)?.links.get(&b).copied()
    }

    pub fn add_node(&mut self, mode: NodeMode) -> NodeId {
        let name = format!("n{}", self.nodes.len());
        self.add_named_node(name, mode)
    }

    pub fn add_named_node(&mut self, name: impl Into<String>, mode: NodeMode) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            name: name.into(),
            mode,
            lsa_seq: 0,
            lsdb: LinkStateDb::default(),
            routes: RoutingTable {
                owner: id,
                entries: BTreeMap::new(),
            },
            interests: InterestTable::default(),
            next_decl: 0,
            links: BTreeMap::new(),
            flows_out: BTreeMap::new(),
            flows_in: BTreeMap::new(),
            ecmp: BTreeMap::new(),
        });
        self.originate_lsa(id);
        id
    }

    pub fn add_link(
        &mut self,
        a: NodeId,
        b: NodeId,
        params: LinkParams,
    ) -> Result<LinkId, NetError> {
        self.node(a)?;
        self.node(b)?;
        if a == b {
            return Err(NetError::InvalidLink("endpoints must differ".into()));
        }
        params.validate()?;
        if self.link_between(a, b).is_some() {
            return Err(NetError::DuplicateLink(a, b));
        }
        let id = LinkId(self.links.len() as u32);
        self.links.push(Link {
            a,
            b,
            params,
            status: LinkStatus::Up,
            epoch: 0,
            tx: Default::default(),
            rx: Default::default(),
        });
        self.nodes[a.0 as usize].links.insert(b, id);
        self.nodes[b.0 as usize].links.insert(a, id);
        self.link_came_up(id);
        Ok(id)
    }

    pub fn set_link_status(&mut self, id: LinkId, status: LinkStatus) -> Result<(), NetError> {
        let link = self
            .links
            .get_mut(id.0 as usize)
            .ok_or(NetError::UnknownLink(id))?;
        if link.status == status {
            return Ok(());
        }
        link.status = status;
        link.reset();
        let (a, b) = (link.a, link.b);
        match status {
            LinkStatus::Up => self.link_came_up(id),
            LinkStatus::Down => {
                self.originate_lsa(a);
                self.originate_lsa(b);
            }
        }
        Ok(())
    }

    fn link_came_up(&mut self, id: LinkId) {
        let (a, b) = {
            let l = &self.links[id.0 as usize];
            (l.a, l.b)
        };
        self.originate_lsa(a);
        self.originate_lsa(b);
        self.exchange_digest(a, b);
        self.exchange_digest(b, a);
    }

    /// Re-runs the HELLO/DIGEST exchange between `node` and all live neighbours.
    pub fn discover(&mut self, node: NodeId) -> Result<(), NetError> {
        self.node(node)?;
        for nb in self.up_neighbors(node) {
            self.exchange_digest(node, nb);
            self.exchange_digest(nb, node);
        }
        Ok(())
    }

    fn exchange_digest(&mut self, from: NodeId, to: NodeId) {
        let n = &self.nodes[from.0 as usize];
        let hello = Control::Hello { mode: n.mode };
        let digest = Control::Digest {
            lsas: n.lsdb.iter().cloned().collect(),
            decls: n.interests.updates().collect(),
        };
        self.send_control(from, to, &hello);
        self.send_control(from, to, &digest);
    }

    fn up_neighbors(&self, node: NodeId) -> Vec<NodeId> {
        self.nodes[node.0 as usize]
            .links
            .iter()
            .filter(|(_, l)| self.links[l.0 as usize].status == LinkStatus::Up)
            .map(|(nb, _)| *nb)
            .collect()
    }

    fn originate_lsa(&mut self, node: NodeId) {
        let adjacencies: Vec<(NodeId, u64)> = self.nodes[node.0 as usize]
            .links
            .iter()
            .map(|(nb, l)| (*nb, &self.links[l.0 as usize]))
            .filter(|(_, l)| l.status == LinkStatus::Up)
            .map(|(nb, l)| (nb, l.params.latency_ms))
            .collect();
        let n = &mut self.nodes[node.0 as usize];
        n.lsa_seq += 1;
        let lsa = Lsa {
            origin: node,
            seq: n.lsa_seq,
            mode: n.mode,
            adjacencies,
        };
        n.lsdb.install(lsa.clone());
        self.recompute_routes(node);
        for nb in self.up_neighbors(node) {
            self.send_control(node, nb, &Control::Lsa(lsa.clone()));
        }
    }

    fn recompute_routes(&mut self, node: NodeId) {
        let n = &mut self.nodes[node.0 as usize];
        n.routes = compute_routes(&n.lsdb, node);
        // retry anything parked for lack of a route
        let parked: Vec<(NodeId, u16, u64)> = n
            .flows_out
            .iter()
            .flat_map(|((dst, ch), flow)| {
                flow.pending
                    .iter()
                    .filter(|(_, m)| m.parked_since.is_some())
                    .map(move |(seq, _)| (*dst, *ch, *seq))
            })
            .filter(|(dst, _, _)| n.routes.get(*dst).is_some())
            .collect();
        for (dst, ch, seq) in parked {
            self.try_send(node, dst, ch, seq);
        }
    }

    /// Declares interest in `expr` at `node` and floods the declaration.
    pub fn declare(
        &mut self,
        node: NodeId,
        kind: DeclKind,
        expr: KeyExpr,
    ) -> Result<DeclId, NetError> {
        self.node(node)?;
        let n = &mut self.nodes[node.0 as usize];
        let id = DeclId {
            origin: node,
            id: n.next_decl,
        };
        n.next_decl += 1;
        let update = DeclUpdate {
            id,
            version: 1,
            decl: Some(Declaration { kind, expr }),
        };
        self.apply_decl(node, None, update);
        Ok(id)
    }

    pub fn propagate_interest(
        &mut self,
        node: NodeId,
        kind: DeclKind,
        expr: KeyExpr,
    ) -> Result<DeclId, NetError> {
        self.declare(node, kind, expr)
    }

    pub fn withdraw(&mut self, id: DeclId) -> Result<(), NetError> {
        let n = self.node(id.origin)?;
        let version = n
            .interests
            .updates()
            .find(|u| u.id == id)
            .map(|u| u.version)
            .ok_or(NetError::UnknownDeclaration(id))?;
        self.apply_decl(
            id.origin,
            None,
            DeclUpdate {
                id,
                version: version + 1,
                decl: None,
            },
        );
        Ok(())
    }

    fn apply_decl(&mut self, node: NodeId, from: Option<NodeId>, update: DeclUpdate) {
        if !self.nodes[node.0 as usize].interests.apply(&update) {
            return;
        }
        if !self.relays_control(node, update.id.origin) {
            return;
        }
        for nb in self.up_neighbors(node) {
            if Some(nb) != from {
                self.send_control(node, nb, &Control::Decl(update.clone()));
            }
        }
    }

    fn relays_control(&self, node: NodeId, origin: NodeId) -> bool {
        origin == node || self.nodes[node.0 as usize].mode != NodeMode::Client
    }

    pub fn schedule_timer(&mut self, node: NodeId, at: u64, token: u64) {
        self.push(at.max(self.now), Ev::Timer { node, token });
    }

    /// Queues `payload` for reliable, ordered delivery to `dst` on `channel`.
    pub fn send_reliable(
        &mut self,
        src: NodeId,
        dst: NodeId,
        channel: u16,
        payload: Vec<u8>,
    ) -> Result<MsgId, NetError> {
        self.node(src)?;
        self.node(dst)?;
        if src == dst {
            return Err(NetError::SelfSend(src));
        }
        if channel == CONTROL_CHANNEL {
            return Err(NetError::ReservedChannel);
        }
        let msg = MsgId(self.next_msg);
        self.next_msg += 1;
        let flow = self.nodes[src.0 as usize]
            .flows_out
            .entry((dst, channel))
            .or_default();
        let seq = flow.next_seq;
        flow.next_seq += 1;
        flow.pending.insert(
            seq,
            OutMsg {
                msg,
                payload: Arc::new(payload),
                parked_since: None,
            },
        );
        self.try_send(src, dst, channel, seq);
        Ok(msg)
    }

    /// Messages from `src` still awaiting an end-to-end acknowledgement.
    pub fn in_flight(&self, src: NodeId) -> usize {
        self.nodes
            .get(src.0 as usize)
            .map(|n| n.flows_out.values().map(|f| f.pending.len()).sum())
            .unwrap_or(0)
    }

    fn try_send(&mut self, node: NodeId, dst: NodeId, channel: u16, seq: u64) {
        let now = self.now;
        let n = &mut self.nodes[node.0 as usize];
        let cost = n.routes.get(dst).map(|e| e.cost);
        let Some(flow) = n.flows_out.get_mut(&(dst, channel)) else {
            return;
        };
        let low = flow.pending.keys().next().copied().unwrap_or(seq);
        let Some(out) = flow.pending.get_mut(&seq) else {
            return;
        };
        match cost {
            None => {
                if out.parked_since.is_none() {
                    out.parked_since = Some(now);
                    let at = now + self.config.unreachable_timeout_ms;
                    self.push(
                        at,
                        Ev::Expire {
                            node,
                            dst,
                            channel,
                            seq,
                            parked_at: now,
                        },
                    );
                }
            }
            Some(cost) => {
                out.parked_since = None;
                let meta = HopMeta::Data {
                    msg: out.msg,
                    src: node,
                    dst,
                    channel,
                    seq,
                    low,
                    visited: vec![node],
                };
                let payload = out.payload.clone();
                self.forward(node, true, meta, &payload);
                let rto = (4 * cost).max(1);
                self.push(
                    now + rto,
                    Ev::E2eRto {
                        node,
                        dst,
                        channel,
                        seq,
                    },
                );
            }
        }
    }

    /// Sends a routed message one hop towards its destination.
    fn forward(&mut self, me: NodeId, originated: bool, meta: HopMeta, payload: &[u8]) {
        let (src, dst, channel, seq, kind, is_ack) = match &meta {
            HopMeta::Data {
                src,
                dst,
                channel,
                seq,
                ..
            } => (*src, *dst, *channel, *seq, FrameKind::Data, false),
            HopMeta::E2eAck {
                src,
                dst,
                channel,
                seq,
            } => (*src, *dst, *channel, *seq, FrameKind::Ack, true),
            HopMeta::Control => return,
        };
        let n = &mut self.nodes[me.0 as usize];
        let hops = match n.routes.get(dst) {
            Some(e) if originated => e.source_hops.clone(),
            Some(e) => e.transit_hops.clone(),
            None => Vec::new(),
        };
        if hops.is_empty() {
            self.stats.no_route_drops += 1;
            return;
        }
        let counter = n.ecmp.entry((src, dst, channel, is_ack)).or_insert(0);
        let next = hops[(*counter % hops.len() as u64) as usize];
        *counter += 1;
        let link = n.links[&next];
        let header = FrameHeader {
            src,
            dst,
            channel,
            seq,
            kind,
        };
        self.link_send(link, me, header, payload, Arc::new(meta));
    }

    fn send_control(&mut self, from: NodeId, to: NodeId, ctl: &Control) {
        let Some(link) = self.link_between(from, to) else {
            return;
        };
        let payload = serde_json::to_vec(ctl).expect("control messages serialize");
        let header = FrameHeader {
            src: from,
            dst: to,
            channel: CONTROL_CHANNEL,
            seq: 0,
            kind: ctl.kind(),
        };
        self.link_send(link, from, header, &payload, Arc::new(HopMeta::Control));
    }

    fn link_send(
        &mut self,
        id: LinkId,
        from: NodeId,
        header: FrameHeader,
        payload: &[u8],
        meta: Arc<HopMeta>,
    ) {
        let link = &mut self.links[id.0 as usize];
        if link.status == LinkStatus::Down {
            return;
        }
        let side = link.side_of(from);
        let epoch = link.epoch;
        let latency = link.params.latency_ms;
        let tx = &mut link.tx[side];
        let msg_id = tx.next_msg;
        tx.next_msg += 1;
        let frames = fragment_payload(header, msg_id, payload, link.params.mtu)
            .expect("link mtu validated at creation");
        let mut wires = Vec::with_capacity(frames.len());
        for frame in frames {
            let link_seq = tx.next_seq;
            tx.next_seq += 1;
            let wire = Wire::Frame {
                epoch,
                link_seq,
                frame,
                meta: meta.clone(),
            };
            tx.unacked.insert(link_seq, wire.clone());
            wires.push((link_seq, wire));
        }
        let now = self.now;
        for (link_seq, wire) in wires {
            self.transmit(id, from, wire);
            self.push(
                now + 4 * latency,
                Ev::LinkRto {
                    link: id,
                    side,
                    epoch,
                    link_seq,
                },
            );
        }
    }

    fn transmit(&mut self, id: LinkId, from: NodeId, wire: Wire) {
        let link = &self.links[id.0 as usize];
        if link.status == LinkStatus::Down {
            return;
        }
        let to = link.other(from);
        let (latency, loss) = (link.params.latency_ms, link.params.loss);
        let (kind, channel, seq, bytes) = match &wire {
            Wire::Frame {
                link_seq, frame, ..
            } => (frame.kind, frame.channel, *link_seq, frame.payload.len()),
            Wire::LinkAck { cumulative, .. } => (FrameKind::Ack, CONTROL_CHANNEL, *cumulative, 0),
        };
        match &wire {
            Wire::Frame { .. } => *self.stats.frames_sent.entry(kind).or_insert(0) += 1,
            Wire::LinkAck { .. } => self.stats.link_acks_sent += 1,
        }
        if self.config.trace_frames {
            let line = format!(
                "NET {} {} {} {} {} {} {}",
                self.now,
                self.name(from),
                self.name(to),
                kind.name(),
                channel,
                seq,
                bytes
            );
            self.trace.record(line);
        }
        if loss > 0.0 && self.rng.gen::<f64>() < loss {
            self.stats.frames_lost += 1;
            return;
        }
        self.push(self.now + latency, Ev::Arrive { link: id, to, wire });
    }

    fn push(&mut self, time: u64, ev: Ev) {
        let seq = self.event_seq;
        self.event_seq += 1;
        self.queue.push(Reverse(Scheduled { time, seq, ev }));
    }

    pub fn next_event_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(s)| s.time)
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Processes the earliest queued event and returns what it produced.
    pub fn step_one(&mut self) -> Option<Vec<NetEvent>> {
        let Reverse(Scheduled { time, ev, .. }) = self.queue.pop()?;
        self.now = self.now.max(time);
        self.handle(ev);
        Some(std::mem::take(&mut self.outbox))
    }

    /// Runs every event up to and including `t_ms`, then sets the clock to `t_ms`.
    pub fn step_until(&mut self, t_ms: u64) -> Vec<NetEvent> {
        let mut out = Vec::new();
        while self.next_event_time().is_some_and(|t| t <= t_ms) {
            out.extend(self.step_one().unwrap_or_default());
        }
        self.advance_to(t_ms);
        out
    }

    pub fn advance_to(&mut self, t_ms: u64) {
        self.now = self.now.max(t_ms);
    }

    /// Runs until the queue drains or the clock would pass `limit_ms`.
    pub fn run_until_idle(&mut self, limit_ms: u64) -> Vec<NetEvent> {
        let mut out = Vec::new();
        while self.next_event_time().is_some_and(|t| t <= limit_ms) {
            out.extend(self.step_one().unwrap_or_default());
        }
        out
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Arrive { link, to, wire } => self.on_arrive(link, to, wire),
            Ev::LinkRto {
                link,
                side,
                epoch,
                link_seq,
            } => {
                let l = &self.links[link.0 as usize];
                if l.status == LinkStatus::Down || l.epoch != epoch {
                    return;
                }
                let Some(wire) = l.tx[side].unacked.get(&link_seq).cloned() else {
                    return;
                };
                let from = if side == 0 { l.a } else { l.b };
                let latency = l.params.latency_ms;
                self.stats.link_retransmissions += 1;
                self.transmit(link, from, wire);
                self.push(
                    self.now + 4 * latency,
                    Ev::LinkRto {
                        link,
                        side,
                        epoch,
                        link_seq,
                    },
                );
            }
            Ev::E2eRto {
                node,
                dst,
                channel,
                seq,
            } => {
                let live = self.nodes[node.0 as usize]
                    .flows_out
                    .get(&(dst, channel))
                    .and_then(|f| f.pending.get(&seq))
                    .is_some_and(|m| m.parked_since.is_none());
                if live {
                    self.stats.e2e_retransmissions += 1;
                    self.try_send(node, dst, channel, seq);
                }
            }
            Ev::Expire {
                node,
                dst,
                channel,
                seq,
                parked_at,
            } => {
                let Some(flow) = self.nodes[node.0 as usize]
                    .flows_out
                    .get_mut(&(dst, channel))
                else {
                    return;
                };
                if flow.pending.get(&seq).and_then(|m| m.parked_since) != Some(parked_at) {
                    return;
                }
                let out = flow.pending.remove(&seq).expect("checked above");
                self.stats.abandoned += 1;
                self.outbox.push(NetEvent::Unreachable {
                    time: self.now,
                    src: node,
                    dst,
                    channel,
                    msg: out.msg,
                });
            }
            Ev::Timer { node, token } => self.outbox.push(NetEvent::Timer {
                time: self.now,
                node,
                token,
            }),
        }
    }

    fn on_arrive(&mut self, id: LinkId, to: NodeId, wire: Wire) {
        let link = &mut self.links[id.0 as usize];
        let wire_epoch = match &wire {
            Wire::Frame { epoch, .. } | Wire::LinkAck { epoch, .. } => *epoch,
        };
        if link.status == LinkStatus::Down || link.epoch != wire_epoch {
            return;
        }
        let from = link.other(to);
        match wire {
            Wire::LinkAck { cumulative, .. } => {
                let tx = &mut link.tx[link.side_of(to)];
                tx.unacked = tx.unacked.split_off(&cumulative);
            }
            Wire::Frame {
                link_seq,
                frame,
                meta,
                ..
            } => {
                let side = link.side_of(from);
                let epoch = link.epoch;
                let rx = &mut link.rx[side];
                if link_seq >= rx.expected {
                    rx.buf.entry(link_seq).or_insert((frame, meta));
                }
                let mut complete = Vec::new();
                while let Some((frame, meta)) = rx.buf.remove(&rx.expected) {
                    rx.expected += 1;
                    let last = frame.frag.is_none_or(|f| f.index + 1 == f.total);
                    rx.partial.push(frame);
                    if last {
                        let frames = std::mem::take(&mut rx.partial);
                        complete.push((frames, meta));
                    }
                }
                let cumulative = rx.expected;
                self.transmit(id, to, Wire::LinkAck { epoch, cumulative });
                for (frames, meta) in complete {
                    let header = frames[0].header();
                    match reassemble(&frames) {
                        Ok(payload) => self.on_hop_message(to, from, header, payload, meta),
                        Err(e) => debug_assert!(false, "link delivered a bad fragment set: {e}"),
                    }
                }
            }
        }
    }

    fn on_hop_message(
        &mut self,
        me: NodeId,
        from: NodeId,
        header: FrameHeader,
        payload: Vec<u8>,
        meta: Arc<HopMeta>,
    ) {
        match meta.as_ref() {
            HopMeta::Control => match serde_json::from_slice::<Control>(&payload) {
                Ok(ctl) => self.on_control(me, from, ctl),
                Err(e) => debug_assert!(false, "undecodable control message: {e}"),
            },
            HopMeta::Data {
                msg,
                src,
                dst,
                channel,
                seq,
                low,
                visited,
            } => {
                if *dst == me {
                    self.on_data(me, *src, *channel, *seq, *low, *msg, payload);
                    return;
                }
                if visited.contains(&me) || visited.len() >= self.config.max_hops {
                    self.stats.loop_drops += 1;
                    return;
                }
                let mut visited = visited.clone();
                visited.push(me);
                let meta = HopMeta::Data {
                    msg: *msg,
                    src: *src,
                    dst: *dst,
                    channel: *channel,
                    seq: *seq,
                    low: *low,
                    visited,
                };
                self.forward(me, false, meta, &payload);
            }
            HopMeta::E2eAck {
                src,
                dst,
                channel,
                seq,
            } => {
                if *dst == me {
                    if let Some(flow) = self.nodes[me.0 as usize]
                        .flows_out
                        .get_mut(&(*src, *channel))
                    {
                        flow.pending.remove(seq);
                    }
                } else {
                    self.forward(me, false, (*meta).clone(), &[]);
                }
            }
        }
        let _ = header;
    }

    #[allow(clippy::too_many_arguments)]
    fn on_data(
        &mut self,
        me: NodeId,
        src: NodeId,
        channel: u16,
        seq: u64,
        low: u64,
        msg: MsgId,
        payload: Vec<u8>,
    ) {
        self.forward(
            me,
            true,
            HopMeta::E2eAck {
                src: me,
                dst: src,
                channel,
                seq,
            },
            &[],
        );
        let now = self.now;
        let flow = self.nodes[me.0 as usize]
            .flows_in
            .entry((src, channel))
            .or_default();
        if seq < flow.next || flow.buf.contains_key(&seq) {
            self.stats.duplicates_suppressed += 1;
            return;
        }
        flow.buf.insert(seq, (msg, payload));
        let mut ready = Vec::new();
        loop {
            match flow.buf.first_key_value().map(|(k, _)| *k) {
                Some(k) if k == flow.next => {
                    let (msg, payload) = flow.buf.remove(&k).expect("present");
                    flow.next += 1;
                    ready.push((msg, payload));
                }
                // everything below `low` is settled at the source
                Some(k) if k <= low => flow.next = k,
                None if flow.next < low => flow.next = low,
                _ => break,
            }
        }
        for (msg, payload) in ready {
            self.stats.delivered += 1;
            self.outbox.push(NetEvent::Delivered {
                time: now,
                src,
                dst: me,
                channel,
                msg,
                payload,
            });
        }
    }

    fn on_control(&mut self, me: NodeId, from: NodeId, ctl: Control) {
        match ctl {
            Control::Hello { .. } => {}
            Control::Lsa(lsa) => {
                if self.install_lsa(me, lsa.clone()) {
                    self.recompute_routes(me);
                    self.flood_lsas(me, from, vec![lsa]);
                }
            }
            Control::Decl(update) => self.apply_decl(me, Some(from), update),
            Control::Digest { lsas, decls } => {
                let fresh: Vec<Lsa> = lsas
                    .into_iter()
                    .filter(|l| self.install_lsa(me, l.clone()))
                    .collect();
                if !fresh.is_empty() {
                    self.recompute_routes(me);
                    self.flood_lsas(me, from, fresh);
                }
                for u in decls {
                    self.apply_decl(me, Some(from), u);
                }
            }
        }
    }

    fn install_lsa(&mut self, me: NodeId, lsa: Lsa) -> bool {
        lsa.origin != me && self.nodes[me.0 as usize].lsdb.install(lsa)
    }

    fn flood_lsas(&mut self, me: NodeId, from: NodeId, lsas: Vec<Lsa>) {
        if self.nodes[me.0 as usize].mode == NodeMode::Client {
            return;
        }
        for nb in self.up_neighbors(me) {
            if nb == from {
                continue;
            }
            if lsas.len() == 1 {
                self.send_control(me, nb, &Control::Lsa(lsas[0].clone()));
            } else {
                self.send_control(
                    me,
                    nb,
                    &Control::Digest {
                        lsas: lsas.clone(),
                        decls: Vec::new(),
                    },
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lossless(lat: u64) -> LinkParams {
        LinkParams::new(lat, 0.0, 1500).unwrap()
    }

    #[test]
    fn triangle_routes_via_middle() {
        let mut sim = Sim::new(1);
        let a = sim.add_node(NodeMode::Router);
        let b = sim.add_node(NodeMode::Router);
        let c = sim.add_node(NodeMode::Router);
        sim.add_link(a, b, lossless(10)).unwrap();
        sim.add_link(b, c, lossless(10)).unwrap();
        sim.add_link(a, c, lossless(25)).unwrap();
        sim.run_until_idle(10_000);
        let e = sim.routes(a).unwrap().get(c).unwrap();
        assert_eq!(e.cost, 20);
        assert_eq!(e.source_hops, vec![b]);
    }

    #[test]
    fn link_errors() {
        let mut sim = Sim::new(1);
        let a = sim.add_node(NodeMode::Router);
        let b = sim.add_node(NodeMode::Router);
        sim.add_link(a, b, lossless(5)).unwrap();
        assert_eq!(
            sim.add_link(b, a, lossless(5)),
            Err(NetError::DuplicateLink(b, a))
        );
        assert_eq!(
            sim.add_link(a, NodeId(9), lossless(5)),
            Err(NetError::UnknownNode(NodeId(9)))
        );
        assert!(LinkParams::new(0, 0.0, 1500).is_err());
        assert!(LinkParams::new(1, 1.0, 1500).is_err());
        assert!(LinkParams::new(1, 0.0, 63).is_err());
        assert_eq!(
            sim.send_reliable(a, a, 1, vec![]),
            Err(NetError::SelfSend(a))
        );
        assert_eq!(
            sim.send_reliable(a, b, 0, vec![]),
            Err(NetError::ReservedChannel)
        );
    }

    #[test]
    fn one_send_arrives_after_link_latency() {
        let mut sim = Sim::new(1);
        let a = sim.add_node(NodeMode::Router);
        let b = sim.add_node(NodeMode::Router);
        sim.add_link(a, b, lossless(10)).unwrap();
        sim.run_until_idle(1_000);
        assert!(sim.step_until(sim.now()).is_empty());
        let t0 = sim.now();
        sim.send_reliable(a, b, 1, b"hi".to_vec()).unwrap();
        let evs = sim.step_until(t0 + 100);
        let delivered: Vec<_> = evs
            .iter()
            .filter_map(|e| match e {
                NetEvent::Delivered { time, payload, .. } => Some((*time, payload.clone())),
                _ => None,
            })
            .collect();
        assert_eq!(delivered, vec![(t0 + 10, b"hi".to_vec())]);
    }

    #[test]
    fn down_link_makes_peer_unreachable() {
        let mut sim = Sim::new(1);
        let a = sim.add_node(NodeMode::Router);
        let b = sim.add_node(NodeMode::Router);
        let l = sim.add_link(a, b, lossless(10)).unwrap();
        sim.run_until_idle(1_000);
        sim.set_link_status(l, LinkStatus::Down).unwrap();
        sim.run_until_idle(2_000);
        assert!(!sim.has_route(a, b));
        sim.send_reliable(a, b, 1, vec![1]).unwrap();
        let evs = sim.run_until_idle(100_000);
        assert!(evs
            .iter()
            .any(|e| matches!(e, NetEvent::Unreachable { dst, .. } if *dst == b)));
        assert_eq!(sim.stats().abandoned, 1);
    }

    #[test]
    fn large_payload_fragments_per_hop() {
        let mut sim = Sim::new(1);
        let a = sim.add_node(NodeMode::Router);
        let b = sim.add_node(NodeMode::Router);
        sim.add_link(a, b, lossless(3)).unwrap();
        sim.run_until_idle(1_000);
        let before = sim.stats().sent(FrameKind::Data);
        let payload: Vec<u8> = (0..5000u32).map(|i| i as u8).collect();
        sim.send_reliable(a, b, 7, payload.clone()).unwrap();
        let evs = sim.run_until_idle(10_000);
        assert_eq!(sim.stats().sent(FrameKind::Data) - before, 4);
        assert!(evs
            .iter()
            .any(|e| matches!(e, NetEvent::Delivered { payload: p, .. } if *p == payload)));
    }

    #[test]
    fn partition_heals_and_parked_message_flows() {
        let mut sim = Sim::new(3);
        let a = sim.add_node(NodeMode::Router);
        let b = sim.add_node(NodeMode::Router);
        let l = sim.add_link(a, b, lossless(10)).unwrap();
        sim.run_until_idle(1_000);
        sim.set_link_status(l, LinkStatus::Down).unwrap();
        sim.run_until_idle(1_000);
        sim.send_reliable(a, b, 1, vec![1]).unwrap();
        sim.send_reliable(a, b, 1, vec![2]).unwrap();
        let t = sim.now();
        sim.step_until(t + 1_000);
        sim.set_link_status(l, LinkStatus::Up).unwrap();
        let evs = sim.run_until_idle(t + 10_000);
        let got: Vec<Vec<u8>> = evs
            .into_iter()
            .filter_map(|e| match e {
                NetEvent::Delivered { payload, .. } => Some(payload),
                _ => None,
            })
            .collect();
        assert_eq!(got, vec![vec![1], vec![2]]);
    }

    #[test]
    fn declarations_flood_and_withdraw() {
        let mut sim = Sim::new(1);
        let a = sim.add_node(NodeMode::Router);
        let b = sim.add_node(NodeMode::Router);
        let c = sim.add_node(NodeMode::Client);
        sim.add_link(a, b, lossless(5)).unwrap();
        sim.add_link(b, c, lossless(5)).unwrap();
        let id = sim
            .declare(c, DeclKind::Sub, "/demo/**".parse().unwrap())
            .unwrap();
        sim.run_until_idle(1_000);
        let path: KeyExpr = "/demo/hello".parse().unwrap();
        assert_eq!(
            sim.interests(a)
                .unwrap()
                .origins_matching(&path, &[DeclKind::Sub]),
            vec![c]
        );
        sim.withdraw(id).unwrap();
        sim.run_until_idle(2_000);
        assert!(sim.interests(a).unwrap().is_empty());
    }
}
