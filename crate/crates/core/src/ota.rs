//! Over-the-air updates: manifests and image repository, the per-target
//! update state machine, and the edge/vehicle protocol over the simulator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{Fabric, FabricError, FabricEvent, Workspace, TIMER_LAYER_SHIFT};
use crate::keyspace::{KeyExpr, Selector};
use crate::netsim::{MsgId, NetEvent, NodeId};
use crate::trace::fnv64;
use crate::twinlcm::Agent;

pub const CH_OTA: u16 = 2;
const TOKEN_LAYER_OTA: u64 = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OtaError {
    #[error("image digest {actual:016x} does not match manifest digest {expected:016x}")]
    DigestMismatch { expected: u64, actual: u64 },
    #[error("{name} {version} is already stored with different bytes")]
    ImmutableEntry { name: String, version: String },
    #[error("manifest {0} is not published")]
    UnknownManifest(String),
    #[error("selector {0} matches no registered vehicle")]
    NoMatchingTargets(String),
    #[error("job {0} already started")]
    DuplicateJob(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job has no lane for {0}")]
    UnknownLane(String),
    #[error("event {event} is not valid in state {state}")]
    IllegalTransition { state: LaneState, event: String },
    #[error("session token rejected")]
    BadToken,
    #[error("image transfer failed: {0}")]
    TransferFailed(String),
    #[error("ECU rejected the firmware: {0}")]
    EcuRejected(String),
    #[error("no update target {0} on the vehicle")]
    UnknownTarget(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

pub fn image_digest(bytes: &[u8]) -> u64 {
    fnv64(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetKind {
    ContainerApp,
    EcuFirmware,
}

impl TargetKind {
    pub fn name(self) -> &'static str {
        match self {
            TargetKind::ContainerApp => "CONTAINER_APP",
            TargetKind::EcuFirmware => "ECU_FIRMWARE",
        }
    }
}

impl FromStr for TargetKind {
    type Err = OtaError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CONTAINER_APP" => Ok(TargetKind::ContainerApp),
            "ECU_FIRMWARE" => Ok(TargetKind::EcuFirmware),
            _ => Err(OtaError::BadManifest(format!("unknown target kind {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub job_id: String,
    pub target_selector: KeyExpr,
    pub target_kind: TargetKind,
    pub name: String,
    pub version: String,
    pub digest: u64,
    pub k_beats: u32,
    pub window_ms: u64,
}

impl Manifest {
    /// Manifest for `image` with the default health policy (3 beats in 5 s).
    pub fn for_image(
        job_id: &str,
        selector: KeyExpr,
        kind: TargetKind,
        name: &str,
        version: &str,
        image: &[u8],
    ) -> Self {
        Manifest {
            job_id: job_id.to_string(),
            target_selector: selector,
            target_kind: kind,
            name: name.to_string(),
            version: version.to_string(),
            digest: image_digest(image),
            k_beats: 3,
            window_ms: 5000,
        }
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "job_id={}", self.job_id)?;
        writeln!(f, "selector={}", self.target_selector)?;
        writeln!(f, "kind={}", self.target_kind.name())?;
        writeln!(f, "name={}", self.name)?;
        writeln!(f, "version={}", self.version)?;
        writeln!(f, "digest={:016x}", self.digest)?;
        writeln!(f, "k_beats={}", self.k_beats)?;
        writeln!(f, "window_ms={}", self.window_ms)
    }
}

impl FromStr for Manifest {
    type Err = OtaError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut kv = BTreeMap::new();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                OtaError::BadManifest(format!("expected key=value, got {line:?}"))
            })?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| OtaError::BadManifest(format!("missing {k}")))
        };
        let bad = |k: &str| OtaError::BadManifest(format!("bad {k}"));
        let k_beats: u32 = kv
            .get("k_beats")
            .map_or(Ok(3), |v| v.parse())
            .map_err(|_| bad("k_beats"))?;
        if k_beats == 0 {
            return Err(bad("k_beats"));
        }
        Ok(Manifest {
            job_id: get("job_id")?.to_string(),
            target_selector: get("selector")?.parse().map_err(|_| bad("selector"))?,
            target_kind: get("kind")?.parse()?,
            name: get("name")?.to_string(),
            version: get("version")?.to_string(),
            digest: u64::from_str_radix(get("digest")?, 16).map_err(|_| bad("digest"))?,
            k_beats,
            window_ms: kv
                .get("window_ms")
                .map_or(Ok(5000), |v| v.parse())
                .map_err(|_| bad("window_ms"))?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageRepo {
    images: BTreeMap<(String, String), Vec<u8>>,
    manifests: BTreeMap<String, Manifest>,
}

impl ImageRepo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish_manifest(&mut self, manifest: Manifest, image: Vec<u8>) -> Result<(), OtaError> {
        let actual = image_digest(&image);
        if actual != manifest.digest {
            return Err(OtaError::DigestMismatch {
                expected: manifest.digest,
                actual,
            });
        }
        let key = (manifest.name.clone(), manifest.version.clone());
        if let Some(existing) = self.images.get(&key) {
            if *existing != image {
                return Err(OtaError::ImmutableEntry {
                    name: key.0,
                    version: key.1,
                });
            }
        }
        self.images.insert(key, image);
        self.manifests.insert(manifest.job_id.clone(), manifest);
        Ok(())
    }

    pub fn manifest(&self, job_id: &str) -> Option<&Manifest> {
        self.manifests.get(job_id)
    }

    pub fn image(&self, name: &str, version: &str) -> Option<&[u8]> {
        self.images
            .get(&(name.to_string(), version.to_string()))
            .map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LaneState {
    Created,
    Distributed,
    ChannelReady,
    Prechecked,
    Updating,
    Validating,
    Committed,
    RollingBack,
    RolledBack,
}

impl LaneState {
    pub const ALL: [LaneState; 9] = [
        LaneState::Created,
        LaneState::Distributed,
        LaneState::ChannelReady,
        LaneState::Prechecked,
        LaneState::Updating,
        LaneState::Validating,
        LaneState::Committed,
        LaneState::RollingBack,
        LaneState::RolledBack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LaneState::Created => "CREATED",
            LaneState::Distributed => "DISTRIBUTED",
            LaneState::ChannelReady => "CHANNEL_READY",
            LaneState::Prechecked => "PRECHECKED",
            LaneState::Updating => "UPDATING",
            LaneState::Validating => "VALIDATING",
            LaneState::Committed => "COMMITTED",
            LaneState::RollingBack => "ROLLING_BACK",
            LaneState::RolledBack => "ROLLED_BACK",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, LaneState::Committed | LaneState::RolledBack)
    }
}

impl fmt::Display for LaneState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LaneState {
    type Err = OtaError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LaneState::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| OtaError::BadManifest(format!("unknown lane state {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JobEvent {
    ImageArrived,
    ChannelEstablished,
    PrecheckPassed,
    ApplyStarted,
    ApplyCompleted,
    HealthConfirmed,
    Failure(String),
    RollbackCompleted,
}

impl JobEvent {
    fn reason(&self) -> String {
        match self {
            JobEvent::ImageArrived => "image_at_edge".into(),
            JobEvent::ChannelEstablished => "token_derived".into(),
            JobEvent::PrecheckPassed => "precheck_healthy".into(),
            JobEvent::ApplyStarted => "apply_started".into(),
            JobEvent::ApplyCompleted => "apply_completed".into(),
            JobEvent::HealthConfirmed => "health_confirmed".into(),
            JobEvent::Failure(r) => r.clone(),
            JobEvent::RollbackCompleted => "rollback_done".into(),
        }
    }
}

/// The lane transition table. `None` means the event is illegal here.
pub fn next_state(state: LaneState, event: &JobEvent) -> Option<LaneState> {
    use LaneState::*;
    match (state, event) {
        (Created, JobEvent::ImageArrived) => Some(Distributed),
        (Distributed, JobEvent::ChannelEstablished) => Some(ChannelReady),
        (ChannelReady, JobEvent::PrecheckPassed) => Some(Prechecked),
        (Prechecked, JobEvent::ApplyStarted) => Some(Updating),
        (Updating, JobEvent::ApplyCompleted) => Some(Validating),
        (Validating, JobEvent::HealthConfirmed) => Some(Committed),
        (RollingBack, JobEvent::Failure(_)) => Some(RollingBack),
        (RollingBack, JobEvent::RollbackCompleted) => Some(RolledBack),
        (s, JobEvent::Failure(_)) if !s.is_terminal() => Some(RollingBack),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub time: u64,
    pub from: LaneState,
    pub to: LaneState,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lane {
    pub target: String,
    pub node: NodeId,
    pub state: LaneState,
    pub prev_version: Option<String>,
    pub failure_reason: Option<String>,
    pub precheck_healthy: Option<bool>,
    pub history: Vec<Transition>,
    token: Option<u64>,
    edge_nonce: u64,
    beats: u32,
    apply_sent: bool,
    generation: u64,
    armed: BTreeSet<LaneState>,
}

impl Lane {
    fn new(target: String, node: NodeId) -> Self {
        Lane {
            target,
            node,
            state: LaneState::Created,
            prev_version: None,
            failure_reason: None,
            precheck_healthy: None,
            history: Vec::new(),
            token: None,
            edge_nonce: 0,
            beats: 0,
            apply_sent: false,
            generation: 0,
            armed: BTreeSet::new(),
        }
    }

    pub fn entered(&self, state: LaneState) -> bool {
        self.history.iter().any(|t| t.to == state)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateJob {
    pub manifest: Manifest,
    pub lanes: Vec<Lane>,
}

impl UpdateJob {
    pub fn new(manifest: Manifest, targets: Vec<(String, NodeId)>) -> Self {
        UpdateJob {
            manifest,
            lanes: targets.into_iter().map(|(t, n)| Lane::new(t, n)).collect(),
        }
    }

    pub fn lane(&self, target: &str) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.target == target)
    }

    pub fn is_finished(&self) -> bool {
        self.lanes.iter().all(|l| l.state.is_terminal())
    }

    /// Applies `event` to one lane and records the transition.
    pub fn advance_job(
        &mut self,
        lane: usize,
        event: JobEvent,
        now: u64,
    ) -> Result<LaneState, OtaError> {
        let l = self
            .lanes
            .get_mut(lane)
            .ok_or_else(|| OtaError::UnknownLane(lane.to_string()))?;
        let illegal = || OtaError::IllegalTransition {
            state: l.state,
            event: event.reason(),
        };
        let to = next_state(l.state, &event).ok_or_else(illegal)?;
        if event == JobEvent::ApplyStarted && l.prev_version.is_none() {
            return Err(illegal());
        }
        if let JobEvent::Failure(r) = &event {
            l.failure_reason.get_or_insert_with(|| r.clone());
        }
        l.history.push(Transition {
            time: now,
            from: l.state,
            to,
            reason: event.reason(),
        });
        l.state = to;
        l.generation += 1;
        Ok(to)
    }
}

/// Keyed 64-bit mix of both nonces and the shared secret.
pub fn session_token(edge_nonce: u64, agent_nonce: u64, secret: u64) -> u64 {
    fn mix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^ (x >> 31)
    }
    mix(secret ^ mix(edge_nonce ^ mix(agent_nonce ^ secret.rotate_left(17))))
}

/// Vehicle side of an authenticated update channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub token: u64,
    pub applied: Option<ApplyOutcome>,
    finished: bool,
}

impl Session {
    pub fn new(token: u64) -> Self {
        Session {
            token,
            applied: None,
            finished: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyCommand {
    pub token: u64,
    pub kind: TargetKind,
    pub name: String,
    pub version: String,
    pub digest: u64,
    pub image: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApplyOutcome {
    pub kind: TargetKind,
    pub name: String,
    pub prev_version: String,
    pub new_version: String,
}

/// Installs the image on the agent if the token and bytes check out.
pub fn apply_target_update(
    agent: &mut Agent,
    session: &Session,
    cmd: &ApplyCommand,
) -> Result<ApplyOutcome, OtaError> {
    if cmd.token != session.token {
        return Err(OtaError::BadToken);
    }
    let actual = image_digest(&cmd.image);
    if actual != cmd.digest {
        return Err(OtaError::TransferFailed(format!(
            "digest {actual:016x} != {:016x}",
            cmd.digest
        )));
    }
    let prev_version = match cmd.kind {
        TargetKind::ContainerApp => {
            if !agent.running().contains_key(&cmd.name) {
                return Err(OtaError::UnknownTarget(cmd.name.clone()));
            }
            agent.store_image(&cmd.name, &cmd.version, cmd.image.clone());
            agent
                .swap_version(&cmd.name, &cmd.version)
                .expect("checked above")
        }
        TargetKind::EcuFirmware => {
            let ecu = agent
                .ecu_mut(&cmd.name)
                .ok_or_else(|| OtaError::UnknownTarget(cmd.name.clone()))?;
            let prev = ecu.version().to_string();
            ecu.apply_firmware(&cmd.version, &cmd.image)
                .map_err(OtaError::EcuRejected)?;
            prev
        }
    };
    Ok(ApplyOutcome {
        kind: cmd.kind,
        name: cmd.name.clone(),
        prev_version,
        new_version: cmd.version.clone(),
    })
}

fn rollback_target(agent: &mut Agent, o: &ApplyOutcome) {
    match o.kind {
        TargetKind::ContainerApp => {
            agent.swap_version(&o.name, &o.prev_version);
            if o.new_version != o.prev_version {
                agent.drop_image(&o.name, &o.new_version);
            }
        }
        TargetKind::EcuFirmware => {
            if let Some(e) = agent.ecu_mut(&o.name) {
                e.restore_backup();
            }
        }
    }
}

fn commit_target(agent: &mut Agent, o: &ApplyOutcome) {
    match o.kind {
        TargetKind::ContainerApp => {
            if o.new_version != o.prev_version {
                agent.drop_image(&o.name, &o.prev_version);
            }
        }
        TargetKind::EcuFirmware => {
            if let Some(e) = agent.ecu_mut(&o.name) {
                e.commit();
            }
        }
    }
}

fn current_version(agent: &Agent, kind: TargetKind, name: &str) -> Option<String> {
    match kind {
        TargetKind::ContainerApp => agent.running().get(name).map(|r| r.version.clone()),
        TargetKind::EcuFirmware => agent.ecu(name).map(|e| e.version().to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
enum OtaMsg {
    Distribute {
        job: usize,
        image: Vec<u8>,
    },
    Hello {
        job: usize,
        lane: usize,
        edge_nonce: u64,
    },
    HelloAck {
        job: usize,
        lane: usize,
        agent_nonce: u64,
    },
    Precheck {
        job: usize,
        lane: usize,
        token: u64,
    },
    PrecheckReply {
        job: usize,
        lane: usize,
        healthy: bool,
        version: Option<String>,
    },
    Apply {
        job: usize,
        lane: usize,
        cmd: ApplyCommand,
    },
    ApplyReply {
        job: usize,
        lane: usize,
        error: Option<String>,
    },
    Heartbeat {
        job: usize,
        lane: usize,
        healthy: bool,
    },
    Commit {
        job: usize,
        lane: usize,
        token: u64,
    },
    Rollback {
        job: usize,
        lane: usize,
        token: u64,
    },
    RollbackAck {
        job: usize,
        lane: usize,
    },
    Rejected {
        job: usize,
        lane: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sent {
    Distribute(usize),
    Forward(usize, usize),
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimerKind {
    Stage = 1,
    Heartbeat = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OtaConfig {
    /// How long the edge waits for a vehicle response before failing the lane.
    pub stage_timeout_ms: u64,
    /// Interval between rollback re-sends while unacknowledged.
    pub rollback_retry_ms: u64,
}

impl Default for OtaConfig {
    fn default() -> Self {
        OtaConfig {
            stage_timeout_ms: 10_000,
            rollback_retry_ms: 2_000,
        }
    }
}

/// Edge controller plus the vehicle-side update handlers.
#[derive(Debug)]
pub struct OtaService {
    cloud: NodeId,
    edge: NodeId,
    edge_ws: Workspace,
    pub repo: ImageRepo,
    config: OtaConfig,
    jobs: Vec<UpdateJob>,
    edge_images: BTreeMap<usize, Vec<u8>>,
    secrets: BTreeMap<NodeId, u64>,
    sessions: BTreeMap<(usize, usize), Session>,
    sent: BTreeMap<MsgId, Sent>,
    rng: ChaCha8Rng,
}

impl OtaService {
    /// `cloud` hosts the image repository; `edge` runs the controller.
    pub fn new(fabric: &mut Fabric, cloud: NodeId, edge: NodeId) -> Result<Self, OtaError> {
        Self::with_config(fabric, cloud, edge, OtaConfig::default())
    }

    pub fn with_config(
        fabric: &mut Fabric,
        cloud: NodeId,
        edge: NodeId,
        config: OtaConfig,
    ) -> Result<Self, OtaError> {
        let edge_ws = fabric.open_workspace(edge)?;
        let seed = fabric.sim().seed() ^ 0x07a0_07a0;
        Ok(OtaService {
            cloud,
            edge,
            edge_ws,
            repo: ImageRepo::new(),
            config,
            jobs: Vec::new(),
            edge_images: BTreeMap::new(),
            secrets: BTreeMap::new(),
            sessions: BTreeMap::new(),
            sent: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Provisions the secret shared between the edge and `vehicle`.
    pub fn enroll(&mut self, vehicle: NodeId, secret: u64) {
        self.secrets.insert(vehicle, secret);
    }

    pub fn publish_manifest(&mut self, manifest: Manifest, image: Vec<u8>) -> Result<(), OtaError> {
        self.repo.publish_manifest(manifest, image)
    }

    pub fn jobs(&self) -> &[UpdateJob] {
        &self.jobs
    }

    pub fn job(&self, job_id: &str) -> Option<&UpdateJob> {
        self.jobs.iter().find(|j| j.manifest.job_id == job_id)
    }

    pub fn session(&self, job_id: &str, target: &str) -> Option<&Session> {
        let (j, l) = self.locate(job_id, target).ok()?;
        self.sessions.get(&(j, l))
    }

    pub fn all_finished(&self) -> bool {
        self.jobs.iter().all(UpdateJob::is_finished)
    }

    fn locate(&self, job_id: &str, target: &str) -> Result<(usize, usize), OtaError> {
        let j = self
            .jobs
            .iter()
            .position(|j| j.manifest.job_id == job_id)
            .ok_or_else(|| OtaError::UnknownJob(job_id.to_string()))?;
        let l = self.jobs[j]
            .lanes
            .iter()
            .position(|l| l.target == target)
            .ok_or_else(|| OtaError::UnknownLane(target.to_string()))?;
        Ok((j, l))
    }

    /// Resolves targets from the fleet registry and ships the image to the edge.
    pub fn start_update_job(&mut self, fabric: &mut Fabric, job_id: &str) -> Result<(), OtaError> {
        let manifest = self
            .repo
            .manifest(job_id)
            .cloned()
            .ok_or_else(|| OtaError::UnknownManifest(job_id.to_string()))?;
        if self.job(job_id).is_some() {
            return Err(OtaError::DuplicateJob(job_id.to_string()));
        }
        let sel = Selector::new(manifest.target_selector.clone());
        let replies = fabric.get_blocking(self.edge_ws, &sel)?.replies;
        let mut targets: Vec<(String, NodeId)> = Vec::new();
        for r in replies {
            let Some(name) = r.value.as_text() else {
                continue;
            };
            let Some(node) = fabric.sim().node_by_name(name.trim()) else {
                continue;
            };
            if !targets.iter().any(|t| t.1 == node) {
                targets.push((name.trim().to_string(), node));
            }
        }
        if targets.is_empty() {
            return Err(OtaError::NoMatchingTargets(
                manifest.target_selector.to_string(),
            ));
        }
        let image = self
            .repo
            .image(&manifest.name, &manifest.version)
            .expect("published with manifest")
            .to_vec();
        let j = self.jobs.len();
        self.jobs.push(UpdateJob::new(manifest, targets));
        for l in 0..self.jobs[j].lanes.len() {
            self.arm_stage_timer(fabric, j, l);
        }
        let id = self.send(
            fabric,
            self.cloud,
            self.edge,
            &OtaMsg::Distribute { job: j, image },
        );
        if let Some(id) = id {
            self.sent.insert(id, Sent::Distribute(j));
        }
        Ok(())
    }

    /// Fails the lane now if it is in `at` (or `at` is `None`), else when it gets there.
    pub fn inject_failure(
        &mut self,
        fabric: &mut Fabric,
        job_id: &str,
        target: &str,
        at: Option<LaneState>,
    ) -> Result<(), OtaError> {
        let (j, l) = self.locate(job_id, target)?;
        let lane = &mut self.jobs[j].lanes[l];
        match at {
            Some(s) if s != lane.state => {
                lane.armed.insert(s);
            }
            _ if lane.state.is_terminal() => {}
            _ => self.fail(fabric, j, l, "injected_failure"),
        }
        Ok(())
    }

    fn token(kind: TimerKind, j: usize, l: usize, extra: u64) -> u64 {
        (TOKEN_LAYER_OTA << TIMER_LAYER_SHIFT)
            | ((kind as u64) << 48)
            | ((j as u64 & 0xFFFF) << 32)
            | ((l as u64 & 0xFFFF) << 16)
            | (extra & 0xFFFF)
    }

    fn send(
        &mut self,
        fabric: &mut Fabric,
        src: NodeId,
        dst: NodeId,
        msg: &OtaMsg,
    ) -> Option<MsgId> {
        let bytes = serde_json::to_vec(msg).expect("serializes");
        fabric.sim_mut().send_reliable(src, dst, CH_OTA, bytes).ok()
    }

    fn send_forward(&mut self, fabric: &mut Fabric, j: usize, l: usize, msg: &OtaMsg) {
        let node = self.jobs[j].lanes[l].node;
        match self.send(fabric, self.edge, node, msg) {
            Some(id) => {
                self.sent.insert(id, Sent::Forward(j, l));
            }
            None => self.fail(fabric, j, l, "transfer_failed"),
        }
    }

    fn arm_stage_timer(&mut self, fabric: &mut Fabric, j: usize, l: usize) {
        let lane = &self.jobs[j].lanes[l];
        if lane.state.is_terminal() {
            return;
        }
        let wait = match lane.state {
            LaneState::Validating => self.jobs[j].manifest.window_ms,
            LaneState::RollingBack => self.config.rollback_retry_ms,
            _ => self.config.stage_timeout_ms,
        };
        let tok = Self::token(TimerKind::Stage, j, l, lane.generation);
        let at = fabric.now() + wait;
        fabric.sim_mut().schedule_timer(self.edge, at, tok);
    }

    /// Advances a lane, traces it, re-arms its timer and fires armed injections.
    /// Returns whether the lane is still in the state the event led to.
    fn transition(&mut self, fabric: &mut Fabric, j: usize, l: usize, event: JobEvent) -> bool {
        let now = fabric.now();
        let job = &mut self.jobs[j];
        let Ok(to) = job.advance_job(l, event, now) else {
            return false;
        };
        let t = job.lanes[l].history.last().expect("just pushed");
        let line = format!(
            "OTA {} {} {} {} -> {} {}",
            now, job.manifest.job_id, job.lanes[l].target, t.from, t.to, t.reason
        );
        fabric.sim_mut().trace_mut().record(line);
        self.arm_stage_timer(fabric, j, l);
        if self.jobs[j].lanes[l].armed.remove(&to) {
            self.fail(fabric, j, l, "injected_failure");
        }
        self.jobs[j].lanes[l].state == to
    }

    fn fail(&mut self, fabric: &mut Fabric, j: usize, l: usize, reason: &str) {
        if !self.transition(fabric, j, l, JobEvent::Failure(reason.to_string())) {
            return;
        }
        let lane = &self.jobs[j].lanes[l];
        if lane.apply_sent {
            let token = lane.token.unwrap_or_default();
            let node = lane.node;
            if let Some(id) = self.send(
                fabric,
                self.edge,
                node,
                &OtaMsg::Rollback {
                    job: j,
                    lane: l,
                    token,
                },
            ) {
                self.sent.insert(id, Sent::Other);
            }
        } else {
            self.transition(fabric, j, l, JobEvent::RollbackCompleted);
        }
    }

    /// Handles OTA traffic and timers; `agents` holds the vehicle agents by node.
    pub fn on_event(
        &mut self,
        fabric: &mut Fabric,
        ev: &FabricEvent,
        agents: &mut BTreeMap<NodeId, Agent>,
    ) -> bool {
        let FabricEvent::Net(net) = ev else {
            return false;
        };
        match net {
            NetEvent::Timer { token, node, .. }
                if token >> TIMER_LAYER_SHIFT == TOKEN_LAYER_OTA =>
            {
                let kind = (token >> 48) & 0xFF;
                let j = ((token >> 32) & 0xFFFF) as usize;
                let l = ((token >> 16) & 0xFFFF) as usize;
                if kind == TimerKind::Stage as u64 {
                    self.on_stage_timer(fabric, j, l, token & 0xFFFF);
                } else if let Some(agent) = agents.get(node) {
                    let beat = match self.sessions.get(&(j, l)) {
                        Some(Session {
                            applied: Some(o),
                            finished: false,
                            ..
                        }) => Some(agent.is_healthy(&o.name)),
                        _ => None,
                    };
                    if let Some(healthy) = beat {
                        self.send(
                            fabric,
                            *node,
                            self.edge,
                            &OtaMsg::Heartbeat {
                                job: j,
                                lane: l,
                                healthy,
                            },
                        );
                    }
                }
                true
            }
            NetEvent::Delivered {
                channel: CH_OTA,
                src,
                dst,
                payload,
                msg,
                ..
            } => {
                self.sent.remove(msg);
                let Ok(m) = serde_json::from_slice::<OtaMsg>(payload) else {
                    return true;
                };
                if *dst == self.edge {
                    self.on_edge_msg(fabric, m);
                } else if let Some(agent) = agents.get_mut(dst) {
                    self.on_vehicle_msg(fabric, *dst, *src, agent, m);
                }
                true
            }
            NetEvent::Unreachable {
                channel: CH_OTA,
                msg,
                ..
            } => {
                match self.sent.remove(msg) {
                    Some(Sent::Distribute(j)) => {
                        for l in 0..self.jobs[j].lanes.len() {
                            self.fail(fabric, j, l, "transfer_failed");
                        }
                    }
                    Some(Sent::Forward(j, l)) => self.fail(fabric, j, l, "transfer_failed"),
                    _ => {}
                }
                true
            }
            _ => false,
        }
    }

    fn on_stage_timer(&mut self, fabric: &mut Fabric, j: usize, l: usize, generation: u64) {
        let Some(lane) = self.jobs.get(j).and_then(|job| job.lanes.get(l)) else {
            return;
        };
        if lane.generation & 0xFFFF != generation || lane.state.is_terminal() {
            return;
        }
        match lane.state {
            LaneState::Validating => self.fail(fabric, j, l, "heartbeat_miss"),
            LaneState::RollingBack => {
                let (token, node) = (lane.token.unwrap_or_default(), lane.node);
                if let Some(id) = self.send(
                    fabric,
                    self.edge,
                    node,
                    &OtaMsg::Rollback {
                        job: j,
                        lane: l,
                        token,
                    },
                ) {
                    self.sent.insert(id, Sent::Other);
                }
                self.jobs[j].lanes[l].generation += 1;
                self.arm_stage_timer(fabric, j, l);
            }
            _ => self.fail(fabric, j, l, "timeout"),
        }
    }

    fn lane_is(&self, j: usize, l: usize, s: LaneState) -> bool {
        self.jobs
            .get(j)
            .and_then(|job| job.lanes.get(l))
            .is_some_and(|lane| lane.state == s)
    }

    fn on_edge_msg(&mut self, fabric: &mut Fabric, m: OtaMsg) {
        match m {
            OtaMsg::Distribute { job: j, image } => {
                self.edge_images.insert(j, image);
                for l in 0..self.jobs[j].lanes.len() {
                    if !self.lane_is(j, l, LaneState::Created)
                        || !self.transition(fabric, j, l, JobEvent::ImageArrived)
                    {
                        continue;
                    }
                    if !self.secrets.contains_key(&self.jobs[j].lanes[l].node) {
                        self.fail(fabric, j, l, "not_enrolled");
                        continue;
                    }
                    let edge_nonce = self.rng.gen();
                    self.jobs[j].lanes[l].edge_nonce = edge_nonce;
                    self.send_forward(
                        fabric,
                        j,
                        l,
                        &OtaMsg::Hello {
                            job: j,
                            lane: l,
                            edge_nonce,
                        },
                    );
                }
            }
            OtaMsg::HelloAck {
                job: j,
                lane: l,
                agent_nonce,
            } => {
                if !self.lane_is(j, l, LaneState::Distributed) {
                    return;
                }
                let lane = &mut self.jobs[j].lanes[l];
                let token = session_token(lane.edge_nonce, agent_nonce, self.secrets[&lane.node]);
                lane.token = Some(token);
                if self.transition(fabric, j, l, JobEvent::ChannelEstablished) {
                    self.send_forward(
                        fabric,
                        j,
                        l,
                        &OtaMsg::Precheck {
                            job: j,
                            lane: l,
                            token,
                        },
                    );
                }
            }
            OtaMsg::PrecheckReply {
                job: j,
                lane: l,
                healthy,
                version,
            } => {
                if !self.lane_is(j, l, LaneState::ChannelReady) {
                    return;
                }
                self.jobs[j].lanes[l].precheck_healthy = Some(healthy);
                let Some(version) = version.filter(|_| healthy) else {
                    self.fail(fabric, j, l, "unhealthy_precheck");
                    return;
                };
                if !self.transition(fabric, j, l, JobEvent::PrecheckPassed) {
                    return;
                }
                let mf = &self.jobs[j].manifest;
                let cmd = ApplyCommand {
                    token: self.jobs[j].lanes[l].token.expect("channel ready"),
                    kind: mf.target_kind,
                    name: mf.name.clone(),
                    version: mf.version.clone(),
                    digest: mf.digest,
                    image: self.edge_images[&j].clone(),
                };
                let lane = &mut self.jobs[j].lanes[l];
                lane.prev_version = Some(version);
                lane.apply_sent = true;
                self.send_forward(
                    fabric,
                    j,
                    l,
                    &OtaMsg::Apply {
                        job: j,
                        lane: l,
                        cmd,
                    },
                );
                if self.lane_is(j, l, LaneState::Prechecked) {
                    self.transition(fabric, j, l, JobEvent::ApplyStarted);
                }
            }
            OtaMsg::ApplyReply {
                job: j,
                lane: l,
                error,
            } => {
                if !self.lane_is(j, l, LaneState::Updating) {
                    return;
                }
                match error {
                    None => {
                        self.jobs[j].lanes[l].beats = 0;
                        self.transition(fabric, j, l, JobEvent::ApplyCompleted);
                    }
                    Some(e) => self.fail(fabric, j, l, &e),
                }
            }
            OtaMsg::Heartbeat {
                job: j,
                lane: l,
                healthy,
            } => {
                if !self.lane_is(j, l, LaneState::Validating) {
                    return;
                }
                if !healthy {
                    self.fail(fabric, j, l, "unhealthy_heartbeat");
                    return;
                }
                let lane = &mut self.jobs[j].lanes[l];
                lane.beats += 1;
                if lane.beats >= self.jobs[j].manifest.k_beats
                    && self.transition(fabric, j, l, JobEvent::HealthConfirmed)
                {
                    let lane = &self.jobs[j].lanes[l];
                    let (token, node) = (lane.token.unwrap_or_default(), lane.node);
                    self.send(
                        fabric,
                        self.edge,
                        node,
                        &OtaMsg::Commit {
                            job: j,
                            lane: l,
                            token,
                        },
                    );
                }
            }
            OtaMsg::RollbackAck { job: j, lane: l } => {
                if self.lane_is(j, l, LaneState::RollingBack) {
                    self.transition(fabric, j, l, JobEvent::RollbackCompleted);
                }
            }
            OtaMsg::Rejected {
                job: j,
                lane: l,
                reason,
            } if !self.jobs[j].lanes[l].state.is_terminal()
                && !self.lane_is(j, l, LaneState::RollingBack) =>
            {
                self.fail(fabric, j, l, &reason);
            }
            _ => {}
        }
    }

    fn on_vehicle_msg(
        &mut self,
        fabric: &mut Fabric,
        me: NodeId,
        edge: NodeId,
        agent: &mut Agent,
        m: OtaMsg,
    ) {
        let reply = match m {
            OtaMsg::Hello {
                job,
                lane,
                edge_nonce,
            } => {
                let Some(&secret) = self.secrets.get(&me) else {
                    return;
                };
                let agent_nonce = self.rng.gen();
                self.sessions.insert(
                    (job, lane),
                    Session::new(session_token(edge_nonce, agent_nonce, secret)),
                );
                OtaMsg::HelloAck {
                    job,
                    lane,
                    agent_nonce,
                }
            }
            OtaMsg::Precheck { job, lane, token } => match self.sessions.get(&(job, lane)) {
                Some(s) if s.token == token => {
                    let mf = &self.jobs[job].manifest;
                    OtaMsg::PrecheckReply {
                        job,
                        lane,
                        healthy: agent.is_healthy(&mf.name),
                        version: current_version(agent, mf.target_kind, &mf.name),
                    }
                }
                _ => OtaMsg::Rejected {
                    job,
                    lane,
                    reason: "bad_token".into(),
                },
            },
            OtaMsg::Apply { job, lane, cmd } => {
                let Some(session) = self.sessions.get_mut(&(job, lane)) else {
                    return;
                };
                match apply_target_update(agent, session, &cmd) {
                    Ok(o) => {
                        session.applied = Some(o);
                        let mf = &self.jobs[job].manifest;
                        let step = mf.window_ms / (u64::from(mf.k_beats) + 1);
                        for i in 1..=u64::from(mf.k_beats) {
                            let at = fabric.now() + i * step.max(1);
                            fabric.sim_mut().schedule_timer(
                                me,
                                at,
                                Self::token(TimerKind::Heartbeat, job, lane, i),
                            );
                        }
                        OtaMsg::ApplyReply {
                            job,
                            lane,
                            error: None,
                        }
                    }
                    Err(OtaError::BadToken) => OtaMsg::Rejected {
                        job,
                        lane,
                        reason: "bad_token".into(),
                    },
                    Err(e) => OtaMsg::ApplyReply {
                        job,
                        lane,
                        error: Some(
                            match e {
                                OtaError::EcuRejected(_) => "ecu_rejected",
                                OtaError::UnknownTarget(_) => "unknown_target",
                                _ => "transfer_failed",
                            }
                            .into(),
                        ),
                    },
                }
            }
            OtaMsg::Commit { job, lane, token } => {
                if let Some(s) = self
                    .sessions
                    .get_mut(&(job, lane))
                    .filter(|s| s.token == token)
                {
                    if let Some(o) = &s.applied {
                        commit_target(agent, o);
                    }
                    s.finished = true;
                }
                return;
            }
            OtaMsg::Rollback { job, lane, token } => {
                match self.sessions.get_mut(&(job, lane)) {
                    Some(s) if s.token == token => {
                        if let Some(o) = s.applied.take() {
                            rollback_target(agent, &o);
                        }
                        s.finished = true;
                    }
                    // never authenticated, so nothing was applied
                    None if token == 0 => {}
                    _ => return,
                }
                OtaMsg::RollbackAck { job, lane }
            }
            _ => return,
        };
        self.send(fabric, me, edge, &reply);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infomodel::SimulatedEcu;
    use crate::netsim::{LinkParams, NodeMode, Sim};
    use crate::valuecodec::Value;

    #[test]
    fn repo_checks_digest_and_immutability() {
        let mut repo = ImageRepo::new();
        let sel: KeyExpr = "/fleet/**".parse().unwrap();
        let m = Manifest::for_image(
            "j",
            sel.clone(),
            TargetKind::ContainerApp,
            "nav",
            "2.0",
            b"abc",
        );
        assert!(matches!(
            repo.publish_manifest(m.clone(), b"abd".to_vec()),
            Err(OtaError::DigestMismatch { .. })
        ));
        repo.publish_manifest(m.clone(), b"abc".to_vec()).unwrap();
        let other = Manifest::for_image("k", sel, TargetKind::ContainerApp, "nav", "2.0", b"xyz");
        assert!(matches!(
            repo.publish_manifest(other, b"xyz".to_vec()),
            Err(OtaError::ImmutableEntry { .. })
        ));
        let text = m.to_string();
        assert_eq!(text.parse::<Manifest>().unwrap(), m);
    }

    #[test]
    fn transition_table() {
        use LaneState::*;
        let happy = [
            JobEvent::ImageArrived,
            JobEvent::ChannelEstablished,
            JobEvent::PrecheckPassed,
            JobEvent::ApplyStarted,
            JobEvent::ApplyCompleted,
            JobEvent::HealthConfirmed,
        ];
        let mut s = Created;
        for e in &happy {
            s = next_state(s, e).unwrap();
        }
        assert_eq!(s, Committed);
        assert_eq!(next_state(Created, &JobEvent::ApplyCompleted), None);
        assert_eq!(next_state(Committed, &JobEvent::Failure("x".into())), None);
        assert_eq!(
            next_state(Validating, &JobEvent::Failure("x".into())),
            Some(RollingBack)
        );
        let mut job = UpdateJob::new(
            Manifest::for_image(
                "j",
                "/a".parse().unwrap(),
                TargetKind::ContainerApp,
                "a",
                "1",
                b"",
            ),
            vec![("v".into(), NodeId(0))],
        );
        job.advance_job(0, JobEvent::ImageArrived, 0).unwrap();
        job.advance_job(0, JobEvent::ChannelEstablished, 0).unwrap();
        job.advance_job(0, JobEvent::PrecheckPassed, 0).unwrap();
        // prev_version must be recorded first
        assert!(matches!(
            job.advance_job(0, JobEvent::ApplyStarted, 0),
            Err(OtaError::IllegalTransition { .. })
        ));
    }

    #[test]
    fn forged_tokens_change_nothing() {
        let mut agent = Agent::new(NodeId(1));
        agent.install("nav", "1.0", b"old".to_vec());
        let session = Session::new(session_token(1, 2, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let cmd = ApplyCommand {
                token: rng.gen(),
                kind: TargetKind::ContainerApp,
                name: "nav".into(),
                version: "2.0".into(),
                digest: image_digest(b"new"),
                image: b"new".to_vec(),
            };
            assert_eq!(
                apply_target_update(&mut agent, &session, &cmd),
                Err(OtaError::BadToken)
            );
        }
        assert_eq!(agent.running()["nav"].version, "1.0");
        assert_eq!(agent.image("nav", "2.0"), None);
    }

    struct World {
        fabric: Fabric,
        ota: OtaService,
        agents: BTreeMap<NodeId, Agent>,
        vehicles: Vec<NodeId>,
    }

    fn world(kind: TargetKind) -> World {
        let mut sim = Sim::new(11);
        sim.trace_mut().set_keep(true);
        let cloud = sim.add_named_node("cloud", NodeMode::Router);
        let edge = sim.add_named_node("edge", NodeMode::Router);
        sim.add_link(cloud, edge, LinkParams::new(20, 0.0, 1500).unwrap())
            .unwrap();
        let vehicles: Vec<NodeId> = (1..=3)
            .map(|i| {
                let v = sim.add_named_node(format!("v{i}"), NodeMode::Peer);
                sim.add_link(edge, v, LinkParams::new(5, 0.1, 512).unwrap())
                    .unwrap();
                v
            })
            .collect();
        sim.run_until_idle(10_000);
        let mut fabric = Fabric::new(sim);
        let ws = fabric.open_workspace(edge).unwrap();
        fabric
            .register_storage(ws, "/fleet/**".parse().unwrap(), 1)
            .unwrap();
        let mut agents = BTreeMap::new();
        let mut ota = OtaService::new(&mut fabric, cloud, edge).unwrap();
        for (i, v) in vehicles.iter().enumerate() {
            let key: KeyExpr = format!("/fleet/city/v{}", i + 1).parse().unwrap();
            fabric
                .put(ws, &key, Value::text(format!("v{}", i + 1)))
                .unwrap();
            let mut a = Agent::new(*v);
            match kind {
                TargetKind::ContainerApp => a.install("nav", "1.0", b"nav-1.0".to_vec()),
                TargetKind::EcuFirmware => a.add_ecu(
                    "motor",
                    Box::new(SimulatedEcu::new("motor", "1.0", b"fw-1.0".to_vec())),
                ),
            }
            agents.insert(*v, a);
            ota.enroll(*v, 0x5eed + i as u64);
        }
        fabric.run_until_idle(10_000);
        let name = if kind == TargetKind::ContainerApp {
            "nav"
        } else {
            "motor"
        };
        let image = b"image-2.0".repeat(100);
        let m = Manifest::for_image(
            "job1",
            "/fleet/city/**".parse().unwrap(),
            kind,
            name,
            "2.0",
            &image,
        );
        ota.publish_manifest(m, image).unwrap();
        World {
            fabric,
            ota,
            agents,
            vehicles,
        }
    }

    fn run(w: &mut World) {
        while let Some(evs) = w.fabric.step_one() {
            for ev in evs {
                w.ota.on_event(&mut w.fabric, &ev, &mut w.agents);
            }
            if w.ota.all_finished() && w.fabric.now() > 60_000 {
                break;
            }
        }
    }

    #[test]
    fn happy_path_commits_every_lane() {
        let mut w = world(TargetKind::ContainerApp);
        w.ota.start_update_job(&mut w.fabric, "job1").unwrap();
        assert!(matches!(
            w.ota.start_update_job(&mut w.fabric, "job1"),
            Err(OtaError::DuplicateJob(_))
        ));
        run(&mut w);
        let job = w.ota.job("job1").unwrap();
        assert_eq!(job.lanes.len(), 3);
        for (lane, v) in job.lanes.iter().zip(&w.vehicles) {
            assert_eq!(lane.state, LaneState::Committed, "{:?}", lane.history);
            assert_eq!(lane.prev_version.as_deref(), Some("1.0"));
            assert_eq!(w.agents[v].running()["nav"].version, "2.0");
            assert_eq!(w.agents[v].image("nav", "1.0"), None);
        }
    }

    #[test]
    fn validating_failure_rolls_back_one_lane() {
        let mut w = world(TargetKind::EcuFirmware);
        w.ota.start_update_job(&mut w.fabric, "job1").unwrap();
        w.ota
            .inject_failure(&mut w.fabric, "job1", "v2", Some(LaneState::Validating))
            .unwrap();
        run(&mut w);
        let job = w.ota.job("job1").unwrap();
        let states: Vec<LaneState> = job.lanes.iter().map(|l| l.state).collect();
        assert_eq!(
            states,
            [
                LaneState::Committed,
                LaneState::RolledBack,
                LaneState::Committed
            ]
        );
        let ecu = w.agents[&w.vehicles[1]].ecu("motor").unwrap();
        assert_eq!((ecu.version(), ecu.image()), ("1.0", &b"fw-1.0"[..]));
        let lines: Vec<&String> = w
            .fabric
            .sim()
            .trace()
            .lines()
            .iter()
            .filter(|l| l.starts_with("OTA "))
            .collect();
        let logged: usize = job.lanes.iter().map(|l| l.history.len()).sum();
        assert_eq!(lines.len(), logged);
    }

    #[test]
    fn unhealthy_precheck_never_updates() {
        let mut w = world(TargetKind::ContainerApp);
        let v3 = w.vehicles[2];
        w.agents.get_mut(&v3).unwrap().set_health("nav", false);
        w.ota.start_update_job(&mut w.fabric, "job1").unwrap();
        run(&mut w);
        let lane = w.ota.job("job1").unwrap().lane("v3").unwrap().clone();
        assert_eq!(lane.state, LaneState::RolledBack);
        assert_eq!(lane.precheck_healthy, Some(false));
        assert!(!lane.entered(LaneState::Updating));
        assert_eq!(w.agents[&v3].running()["nav"].version, "1.0");
    }

    #[test]
    fn no_targets() {
        let mut w = world(TargetKind::ContainerApp);
        let image = b"x".to_vec();
        let m = Manifest::for_image(
            "job2",
            "/fleet/rural/**".parse().unwrap(),
            TargetKind::ContainerApp,
            "nav",
            "3.0",
            &image,
        );
        w.ota.publish_manifest(m, image).unwrap();
        assert!(matches!(
            w.ota.start_update_job(&mut w.fabric, "job2"),
            Err(OtaError::NoMatchingTargets(_))
        ));
    }
}
