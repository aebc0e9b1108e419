//! Device twins replicated between a cloud node and a vehicle node, and the
//! vehicle-side lifecycle agent that reconciles workloads against them.
//!
//! Twin fields ride the fabric under `/twin/<device>/<side>/<field>`. Each
//! replica merges incoming samples last-writer-wins on `(timestamp, writer)`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::fabric::{
    Fabric, FabricError, FabricEvent, Sample, SampleKind, Sink, Timestamp, Workspace,
    TIMER_LAYER_SHIFT,
};
use crate::hetsched::ResourceVector;
use crate::infomodel::FirmwareTarget;
use crate::keyspace::KeyExpr;
use crate::netsim::NodeId;
use crate::valuecodec::{transcode, EncodingTag, Value};

pub const TWIN_PREFIX: &str = "/twin";
const TOKEN_LAYER_TWIN: u64 = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TwinError {
    #[error("{replica:?} replica may not write the {side} document")]
    WrongSideWriter { side: Side, replica: Replica },
    #[error("twin {0} replicas cannot reach each other")]
    Unreachable(String),
    #[error("unknown twin {0}")]
    UnknownTwin(usize),
    #[error("invalid twin field name {0:?}")]
    BadField(String),
    #[error("invalid device name {0:?}")]
    BadDevice(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Desired,
    Reported,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Desired => "desired",
            Side::Reported => "reported",
        }
    }

    fn from_name(s: &str) -> Option<Side> {
        match s {
            "desired" => Some(Side::Desired),
            "reported" => Some(Side::Reported),
            _ => None,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Replica {
    Cloud,
    Vehicle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldEntry {
    pub value: Value,
    pub ts: Timestamp,
    pub writer: NodeId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TwinDoc {
    fields: BTreeMap<String, FieldEntry>,
}

impl TwinDoc {
    pub fn get(&self, field: &str) -> Option<&FieldEntry> {
        self.fields.get(field)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FieldEntry)> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Keeps `entry` if it beats the held one on `(ts, writer)`. True on change.
    pub fn merge(&mut self, field: &str, entry: FieldEntry) -> bool {
        match self.fields.get(field) {
            Some(cur) if (cur.ts, cur.writer) >= (entry.ts, entry.writer) => false,
            _ => {
                self.fields.insert(field.to_string(), entry);
                true
            }
        }
    }

    /// Per-field `(ts, writer)` summary exchanged before deltas.
    pub fn digest(&self) -> BTreeMap<&str, (Timestamp, NodeId)> {
        self.fields
            .iter()
            .map(|(k, e)| (k.as_str(), (e.ts, e.writer)))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplicaDocs {
    pub desired: TwinDoc,
    pub reported: TwinDoc,
}

impl ReplicaDocs {
    fn doc_mut(&mut self, side: Side) -> &mut TwinDoc {
        match side {
            Side::Desired => &mut self.desired,
            Side::Reported => &mut self.reported,
        }
    }

    pub fn doc(&self, side: Side) -> &TwinDoc {
        match side {
            Side::Desired => &self.desired,
            Side::Reported => &self.reported,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyncReport {
    pub device: String,
    /// Pending offline deltas replayed before the digest comparison.
    pub flushed: Vec<String>,
    pub to_cloud: Vec<String>,
    pub to_vehicle: Vec<String>,
}

impl SyncReport {
    pub fn transferred(&self) -> usize {
        self.to_cloud.len() + self.to_vehicle.len()
    }
}

impl fmt::Display for SyncReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} flushed={} to_cloud={} to_vehicle={}",
            self.device,
            self.flushed.len(),
            self.to_cloud.join(","),
            self.to_vehicle.join(",")
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TwinId(pub usize);

#[derive(Debug)]
struct Twin {
    device: String,
    cloud: Workspace,
    vehicle: Workspace,
    docs: [ReplicaDocs; 2],
    connected: bool,
    resync: bool,
    pending: VecDeque<Sample>,
}

impl Twin {
    fn ws(&self, r: Replica) -> Workspace {
        match r {
            Replica::Cloud => self.cloud,
            Replica::Vehicle => self.vehicle,
        }
    }
}

fn idx(r: Replica) -> usize {
    match r {
        Replica::Cloud => 0,
        Replica::Vehicle => 1,
    }
}

pub fn twin_key(device: &str, side: Side, field: &str) -> Result<KeyExpr, TwinError> {
    format!("{TWIN_PREFIX}/{device}/{}/{field}", side.name())
        .parse()
        .map_err(|_| TwinError::BadField(field.to_string()))
}

/// All twins in a run, bound to one fabric.
#[derive(Debug, Default)]
pub struct TwinHub {
    twins: Vec<Twin>,
}

impl TwinHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_twin(
        &mut self,
        fabric: &mut Fabric,
        device: &str,
        cloud: NodeId,
        vehicle: NodeId,
    ) -> Result<TwinId, TwinError> {
        if device.is_empty() || device.contains(['/', '*', '?']) {
            return Err(TwinError::BadDevice(device.to_string()));
        }
        let id = TwinId(self.twins.len());
        let cws = fabric.open_workspace(cloud)?;
        let vws = fabric.open_workspace(vehicle)?;
        let scope = |side: Side| -> KeyExpr {
            format!("{TWIN_PREFIX}/{device}/{}/**", side.name())
                .parse()
                .expect("device checked")
        };
        fabric.subscribe(
            cws,
            scope(Side::Reported),
            Sink::Notify(token(id, Replica::Cloud)),
        )?;
        fabric.subscribe(
            vws,
            scope(Side::Desired),
            Sink::Notify(token(id, Replica::Vehicle)),
        )?;
        self.twins.push(Twin {
            device: device.to_string(),
            cloud: cws,
            vehicle: vws,
            docs: Default::default(),
            connected: true,
            resync: false,
            pending: VecDeque::new(),
        });
        Ok(id)
    }

    fn twin(&self, id: TwinId) -> Result<&Twin, TwinError> {
        self.twins.get(id.0).ok_or(TwinError::UnknownTwin(id.0))
    }

    pub fn find(&self, device: &str) -> Option<TwinId> {
        self.twins
            .iter()
            .position(|t| t.device == device)
            .map(TwinId)
    }

    pub fn docs(&self, id: TwinId, replica: Replica) -> Option<&ReplicaDocs> {
        self.twins.get(id.0).map(|t| &t.docs[idx(replica)])
    }

    pub fn is_connected(&self, id: TwinId) -> bool {
        self.twins.get(id.0).is_some_and(|t| t.connected)
    }

    pub fn pending(&self, id: TwinId) -> usize {
        self.twins.get(id.0).map_or(0, |t| t.pending.len())
    }

    /// Both replicas hold identical documents.
    pub fn converged(&self, id: TwinId) -> bool {
        self.twins.get(id.0).is_some_and(|t| t.docs[0] == t.docs[1])
    }

    pub fn twin_write(
        &mut self,
        fabric: &mut Fabric,
        id: TwinId,
        side: Side,
        replica: Replica,
        field: &str,
        value: Value,
    ) -> Result<Timestamp, TwinError> {
        let allowed = matches!(
            (side, replica),
            (Side::Desired, Replica::Cloud) | (Side::Reported, Replica::Vehicle)
        );
        if !allowed {
            return Err(TwinError::WrongSideWriter { side, replica });
        }
        if field.is_empty() || field.contains(['/', '*', '?']) {
            return Err(TwinError::BadField(field.to_string()));
        }
        let twin = self.twin(id)?;
        let key = twin_key(&twin.device, side, field)?;
        let ws = twin.ws(replica);
        let connected = twin.connected;
        let ts = fabric.timestamp(ws)?;
        let sample = Sample {
            key,
            value: value.clone(),
            ts,
            kind: SampleKind::Put,
        };
        if connected {
            fabric.put_sample(ws, sample)?;
        } else if side == Side::Reported {
            self.twins[id.0].pending.push_back(sample);
        }
        let twin = &mut self.twins[id.0];
        twin.docs[idx(replica)].doc_mut(side).merge(
            field,
            FieldEntry {
                value,
                ts,
                writer: ws.node(),
            },
        );
        let line = format!(
            "TWIN {} {} WRITE {} {} {}",
            fabric.now(),
            twin.device,
            side,
            field,
            ts
        );
        fabric.sim_mut().trace_mut().record(line);
        Ok(ts)
    }

    /// Applies a twin sample addressed to one of the replicas. Returns false
    /// for events that belong to someone else.
    pub fn on_event(&mut self, ev: &FabricEvent) -> bool {
        let FabricEvent::Sample { token, sample, .. } = ev else {
            return false;
        };
        if token >> TIMER_LAYER_SHIFT != TOKEN_LAYER_TWIN {
            return false;
        }
        let raw = token & ((1 << TIMER_LAYER_SHIFT) - 1);
        let (tid, replica) = (
            (raw >> 1) as usize,
            if raw & 1 == 0 {
                Replica::Cloud
            } else {
                Replica::Vehicle
            },
        );
        let Some(twin) = self.twins.get_mut(tid) else {
            return true;
        };
        let text = sample.key.as_str();
        let mut parts = text.trim_start_matches('/').splitn(4, '/');
        let (_, _, side, field) = (parts.next(), parts.next(), parts.next(), parts.next());
        if let (Some(side), Some(field)) = (side.and_then(Side::from_name), field) {
            twin.docs[idx(replica)].doc_mut(side).merge(
                field,
                FieldEntry {
                    value: sample.value.clone(),
                    ts: sample.ts,
                    writer: sample.ts.node,
                },
            );
        }
        true
    }

    /// Digest comparison followed by delta transfer in both directions.
    pub fn twin_sync(&mut self, fabric: &mut Fabric, id: TwinId) -> Result<SyncReport, TwinError> {
        let twin = self.twin(id)?;
        if !fabric
            .sim()
            .has_route(twin.cloud.node(), twin.vehicle.node())
        {
            return Err(TwinError::Unreachable(twin.device.clone()));
        }
        let flushed = self.flush_pending(fabric, id)?;
        let twin = &self.twins[id.0];
        let mut report = SyncReport {
            device: twin.device.clone(),
            flushed: flushed.iter().map(|s| s.key.to_string()).collect(),
            ..Default::default()
        };
        let mut sends = Vec::new();
        for side in [Side::Desired, Side::Reported] {
            let cloud = twin.docs[0].doc(side);
            let vehicle = twin.docs[1].doc(side);
            let (cd, vd) = (cloud.digest(), vehicle.digest());
            let mut fields: Vec<&str> = cd.keys().chain(vd.keys()).copied().collect();
            fields.sort_unstable();
            fields.dedup();
            for field in fields {
                let key = twin_key(&twin.device, side, field)?;
                if flushed.iter().any(|s| s.key == key) {
                    continue;
                }
                let (from, entry) = match cd.get(field).cmp(&vd.get(field)) {
                    Ordering::Equal => continue,
                    Ordering::Greater => (Replica::Cloud, cloud.get(field)),
                    Ordering::Less => (Replica::Vehicle, vehicle.get(field)),
                };
                let entry = entry.expect("the larger digest entry exists");
                let label = format!("{side}/{field}");
                match from {
                    Replica::Cloud => report.to_vehicle.push(label),
                    Replica::Vehicle => report.to_cloud.push(label),
                }
                sends.push((
                    twin.ws(from),
                    Sample {
                        key,
                        value: entry.value.clone(),
                        ts: entry.ts,
                        kind: SampleKind::Put,
                    },
                ));
            }
        }
        for (ws, sample) in sends {
            fabric.put_sample(ws, sample)?;
        }
        let line = format!("TWIN {} SYNC {}", fabric.now(), report);
        fabric.sim_mut().trace_mut().record(line);
        Ok(report)
    }

    fn flush_pending(&mut self, fabric: &mut Fabric, id: TwinId) -> Result<Vec<Sample>, TwinError> {
        let twin = &mut self.twins[id.0];
        let ws = twin.vehicle;
        let pending: Vec<Sample> = twin.pending.drain(..).collect();
        for s in &pending {
            fabric.put_sample(ws, s.clone())?;
        }
        Ok(pending)
    }

    /// On a false-to-true transition, flushes pending deltas and syncs. When
    /// no route exists yet the sync is retried by [`TwinHub::poll`].
    pub fn set_connectivity(
        &mut self,
        fabric: &mut Fabric,
        id: TwinId,
        connected: bool,
    ) -> Result<Option<SyncReport>, TwinError> {
        let twin = self
            .twins
            .get_mut(id.0)
            .ok_or(TwinError::UnknownTwin(id.0))?;
        let was = std::mem::replace(&mut twin.connected, connected);
        if !connected {
            twin.resync = false;
            return Ok(None);
        }
        if was {
            return Ok(None);
        }
        twin.resync = true;
        Ok(self.poll_one(fabric, id))
    }

    fn poll_one(&mut self, fabric: &mut Fabric, id: TwinId) -> Option<SyncReport> {
        if !self.twins[id.0].resync {
            return None;
        }
        match self.twin_sync(fabric, id) {
            Ok(r) => {
                self.twins[id.0].resync = false;
                Some(r)
            }
            Err(_) => None,
        }
    }

    /// Completes reconnect syncs that were waiting for a route.
    pub fn poll(&mut self, fabric: &mut Fabric) -> Vec<SyncReport> {
        (0..self.twins.len())
            .filter_map(|i| self.poll_one(fabric, TwinId(i)))
            .collect()
    }

    pub fn awaiting_sync(&self) -> bool {
        self.twins.iter().any(|t| t.resync)
    }
}

fn token(id: TwinId, replica: Replica) -> u64 {
    (TOKEN_LAYER_TWIN << TIMER_LAYER_SHIFT) | ((id.0 as u64) << 1) | idx(replica) as u64
}

/// Dotted-integer comparison; non-numeric parts compare as text.
pub fn compare_versions(a: &str, b: &str) -> Ordering {
    let mut x = a.split('.');
    let mut y = b.split('.');
    loop {
        match (x.next(), y.next()) {
            (None, None) => return Ordering::Equal,
            (Some(p), None) => {
                return if p.trim_start_matches('0').is_empty()
                    && x.clone().all(|q| q.trim_start_matches('0').is_empty())
                {
                    Ordering::Equal
                } else {
                    Ordering::Greater
                }
            }
            (None, Some(q)) => {
                return if q.trim_start_matches('0').is_empty()
                    && y.clone().all(|r| r.trim_start_matches('0').is_empty())
                {
                    Ordering::Equal
                } else {
                    Ordering::Less
                }
            }
            (Some(p), Some(q)) => {
                let o = match (p.parse::<u64>(), q.parse::<u64>()) {
                    (Ok(m), Ok(n)) => m.cmp(&n),
                    _ => p.cmp(q),
                };
                if o != Ordering::Equal {
                    return o;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RestartPolicy {
    Always,
    Never,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub id: String,
    pub image: String,
    pub version: String,
    pub restart_policy: RestartPolicy,
    pub demand: ResourceVector,
}

impl WorkloadSpec {
    pub fn field_name(&self) -> String {
        format!("workload.{}", self.id)
    }

    /// Twin field encoding: PROPERTIES `image=..;version=..;policy=..;cpu=..;gpu=..;npu=..`.
    pub fn to_value(&self) -> Value {
        let policy = match self.restart_policy {
            RestartPolicy::Always => "ALWAYS",
            RestartPolicy::Never => "NEVER",
        };
        let (cpu, gpu, npu) = (
            self.demand.cpu.to_string(),
            self.demand.gpu.to_string(),
            self.demand.npu.to_string(),
        );
        Value::from_properties(&[
            ("image", self.image.as_str()),
            ("version", self.version.as_str()),
            ("policy", policy),
            ("cpu", &cpu),
            ("gpu", &gpu),
            ("npu", &npu),
        ])
        .expect("fields are plain tokens")
    }

    pub fn from_field(field: &str, value: &Value) -> Option<WorkloadSpec> {
        let id = field.strip_prefix("workload.")?;
        let tree = transcode(value, EncodingTag::Tree).ok()?.as_tree()?;
        let map = tree.as_flat_map()?;
        let num = |k: &str| map.get(k).and_then(|v| v.parse().ok()).unwrap_or(0);
        Some(WorkloadSpec {
            id: id.to_string(),
            image: map.get("image").map_or(id, |v| v).to_string(),
            version: map.get("version")?.to_string(),
            restart_policy: match map.get("policy").copied() {
                Some("NEVER") => RestartPolicy::Never,
                _ => RestartPolicy::Always,
            },
            demand: ResourceVector::new(num("cpu"), num("gpu"), num("npu")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Start {
        id: String,
        version: String,
    },
    Restart {
        id: String,
    },
    Replace {
        id: String,
        from: String,
        to: String,
    },
    Stop {
        id: String,
    },
}

impl Action {
    pub fn workload(&self) -> &str {
        match self {
            Action::Start { id, .. }
            | Action::Restart { id }
            | Action::Replace { id, .. }
            | Action::Stop { id } => id,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Start { id, version } => write!(f, "START {id} {version}"),
            Action::Restart { id } => write!(f, "RESTART {id}"),
            Action::Replace { id, from, to } => write!(f, "REPLACE {id} {from} {to}"),
            Action::Stop { id } => write!(f, "STOP {id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Running {
    pub version: String,
    pub healthy: bool,
    pub restarts: u32,
}

/// Vehicle-side lifecycle agent.
pub struct Agent {
    pub node: NodeId,
    connected: bool,
    desired: BTreeMap<String, WorkloadSpec>,
    running: BTreeMap<String, Running>,
    images: BTreeMap<(String, String), Vec<u8>>,
    ecus: BTreeMap<String, Box<dyn FirmwareTarget>>,
    sick_ecus: BTreeSet<String>,
}

impl fmt::Debug for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Agent")
            .field("node", &self.node)
            .field("connected", &self.connected)
            .field("desired", &self.desired.keys().collect::<Vec<_>>())
            .field("running", &self.running)
            .field("ecus", &self.ecus.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Agent {
    pub fn new(node: NodeId) -> Self {
        Agent {
            node,
            connected: true,
            desired: BTreeMap::new(),
            running: BTreeMap::new(),
            images: BTreeMap::new(),
            ecus: BTreeMap::new(),
            sick_ecus: BTreeSet::new(),
        }
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn set_connected(&mut self, connected: bool) {
        self.connected = connected;
    }

    /// Replaces the cached desired set from the twin's desired document.
    /// Ignored while disconnected: the agent keeps its last cache.
    pub fn refresh_desired(&mut self, doc: &TwinDoc) {
        if !self.connected {
            return;
        }
        self.desired = doc
            .iter()
            .filter_map(|(field, e)| WorkloadSpec::from_field(field, &e.value))
            .map(|w| (w.id.clone(), w))
            .collect();
    }

    pub fn desired(&self) -> &BTreeMap<String, WorkloadSpec> {
        &self.desired
    }

    pub fn running(&self) -> &BTreeMap<String, Running> {
        &self.running
    }

    /// Installs a workload as running without going through reconciliation.
    pub fn install(&mut self, id: &str, version: &str, image: Vec<u8>) {
        self.images
            .insert((id.to_string(), version.to_string()), image);
        self.running.insert(
            id.to_string(),
            Running {
                version: version.to_string(),
                healthy: true,
                restarts: 0,
            },
        );
    }

    /// Injected health for a workload or ECU. False if `id` is neither.
    pub fn set_health(&mut self, id: &str, healthy: bool) -> bool {
        if let Some(r) = self.running.get_mut(id) {
            r.healthy = healthy;
            return true;
        }
        if self.ecus.contains_key(id) {
            if healthy {
                self.sick_ecus.remove(id);
            } else {
                self.sick_ecus.insert(id.to_string());
            }
            return true;
        }
        false
    }

    pub fn is_healthy(&self, id: &str) -> bool {
        match self.running.get(id) {
            Some(r) => r.healthy,
            None => self.ecus.contains_key(id) && !self.sick_ecus.contains(id),
        }
    }

    pub fn image(&self, name: &str, version: &str) -> Option<&[u8]> {
        self.images
            .get(&(name.to_string(), version.to_string()))
            .map(Vec::as_slice)
    }

    pub fn store_image(&mut self, name: &str, version: &str, bytes: Vec<u8>) {
        self.images
            .insert((name.to_string(), version.to_string()), bytes);
    }

    pub fn drop_image(&mut self, name: &str, version: &str) {
        self.images.remove(&(name.to_string(), version.to_string()));
    }

    /// Points a running workload at another version, returning the old one.
    pub fn swap_version(&mut self, id: &str, version: &str) -> Option<String> {
        let r = self.running.get_mut(id)?;
        r.healthy = true;
        Some(std::mem::replace(&mut r.version, version.to_string()))
    }

    pub fn add_ecu(&mut self, id: &str, ecu: Box<dyn FirmwareTarget>) {
        self.ecus.insert(id.to_string(), ecu);
    }

    pub fn ecu(&self, id: &str) -> Option<&dyn FirmwareTarget> {
        self.ecus.get(id).map(|b| b.as_ref())
    }

    pub fn ecu_mut(&mut self, id: &str) -> Option<&mut (dyn FirmwareTarget + 'static)> {
        self.ecus.get_mut(id).map(|b| b.as_mut())
    }

    /// Reconciles running workloads against the cached desired set, one
    /// action per workload, and applies them.
    pub fn agent_tick(&mut self, _now: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        for (id, spec) in &self.desired {
            match self.running.get(id) {
                None => actions.push(Action::Start {
                    id: id.clone(),
                    version: spec.version.clone(),
                }),
                Some(r) if r.version != spec.version => actions.push(Action::Replace {
                    id: id.clone(),
                    from: r.version.clone(),
                    to: spec.version.clone(),
                }),
                Some(r) if !r.healthy && spec.restart_policy == RestartPolicy::Always => {
                    actions.push(Action::Restart { id: id.clone() })
                }
                Some(_) => {}
            }
        }
        for id in self.running.keys() {
            if !self.desired.contains_key(id) {
                actions.push(Action::Stop { id: id.clone() });
            }
        }
        for a in &actions {
            match a {
                Action::Start { id, version } => {
                    self.running.insert(
                        id.clone(),
                        Running {
                            version: version.clone(),
                            healthy: true,
                            restarts: 0,
                        },
                    );
                }
                Action::Restart { id } => {
                    let r = self
                        .running
                        .get_mut(id)
                        .expect("restart targets a running workload");
                    r.healthy = true;
                    r.restarts += 1;
                }
                Action::Replace { id, to, .. } => {
                    self.swap_version(id, to);
                }
                Action::Stop { id } => {
                    self.running.remove(id);
                }
            }
        }
        actions
    }
}
