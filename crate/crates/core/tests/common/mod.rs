//! Oracles and fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecof::fabric::{
    consolidate_replies, Fabric, Reply, ReplyOrigin, Sample, SampleKind, Sink, Workspace,
};
use vecof::hetsched::{ComputeSite, ResourceVector, SiteClass, TaskSpec};
use vecof::infomodel::SimulatedEcu;
use vecof::keyspace::{Chunk, KeyExpr, Selector};
use vecof::netsim::{LinkParams, LinkStatus, NodeId, NodeMode, Sim};
use vecof::ota::{LaneState, Manifest, OtaService, TargetKind};
use vecof::twinlcm::{Agent, Replica, Side, TwinHub, WorkloadSpec};
use vecof::valuecodec::Value;

pub const ALPHA: [&str; 3] = ["a", "b", "c"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- keyspace

pub fn expr_of(chunks: &[u8]) -> KeyExpr {
    let text: String = chunks
        .iter()
        .map(|c| match c {
            0..=2 => format!("/{}", ALPHA[*c as usize]),
            3 => "/*".to_string(),
            _ => "/**".to_string(),
        })
        .collect();
    text.parse().expect("generated expressions are well formed")
}

pub fn key_of(word: &[u8]) -> KeyExpr {
    expr_of(word)
}

/// Every chunk sequence of length 1..=depth over `symbols` symbols.
pub fn all_sequences(symbols: u8, depth: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<u8>> = vec![vec![]];
    for _ in 0..depth {
        layer = layer
            .iter()
            .flat_map(|p| {
                (0..symbols).map(move |s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

/// All concrete words of exactly `n` chunks denoted by the expression, by expansion.
pub fn expand(expr: &KeyExpr, n: usize) -> BTreeSet<Vec<u8>> {
    fn go(chunks: &[Chunk], n: usize, prefix: &mut Vec<u8>, out: &mut BTreeSet<Vec<u8>>) {
        let Some((first, rest)) = chunks.split_first() else {
            if prefix.len() == n {
                out.insert(prefix.clone());
            }
            return;
        };
        if prefix.len() > n {
            return;
        }
        match first {
            Chunk::Literal(l) => {
                let Some(i) = ALPHA.iter().position(|a| a == l) else {
                    return;
                };
                prefix.push(i as u8);
                go(rest, n, prefix, out);
                prefix.pop();
            }
            Chunk::Star => {
                for i in 0..ALPHA.len() as u8 {
                    prefix.push(i);
                    go(rest, n, prefix, out);
                    prefix.pop();
                }
            }
            Chunk::DoubleStar => {
                let room = n - prefix.len();
                for k in 0..=room {
                    for fill in all_exact(k) {
                        let len = prefix.len();
                        prefix.extend(&fill);
                        go(rest, n, prefix, out);
                        prefix.truncate(len);
                    }
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    go(expr.chunks(), n, &mut Vec::new(), &mut out);
    out
}

fn all_exact(k: usize) -> Vec<Vec<u8>> {
    let mut layer = vec![vec![]];
    for _ in 0..k {
        layer = layer
            .iter()
            .flat_map(|p: &Vec<u8>| {
                (0..ALPHA.len() as u8).map(move |s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
    }
    layer
}

/// Word membership by expansion.
pub fn oracle_matches(expr: &KeyExpr, word: &[u8]) -> bool {
    expand(expr, word.len()).contains(word)
}

/// Intersection by reachability in the product of the two expressions'
/// automata. Symbols are the alphabet plus one symbol no literal uses.
pub fn oracle_intersects(a: &KeyExpr, b: &KeyExpr) -> bool {
    let (x, y) = (a.chunks(), b.chunks());
    let closure = |c: &[Chunk], i: usize| -> Vec<usize> {
        let mut v = vec![i];
        let mut j = i;
        while j < c.len() && c[j] == Chunk::DoubleStar {
            j += 1;
            v.push(j);
        }
        v
    };
    let step = |c: &[Chunk], i: usize, sym: Option<&str>| -> Vec<usize> {
        let mut out = Vec::new();
        for s in closure(c, i) {
            match c.get(s) {
                Some(Chunk::DoubleStar) => out.push(s),
                Some(Chunk::Star) => out.extend(closure(c, s + 1)),
                Some(Chunk::Literal(l)) if Some(l.as_str()) == sym => out.extend(closure(c, s + 1)),
                _ => {}
            }
        }
        out
    };
    let syms: Vec<Option<&str>> = ALPHA.iter().map(|s| Some(*s)).chain([None]).collect();
    let mut seen = BTreeSet::new();
    let mut frontier: Vec<(usize, usize)> = Vec::new();
    for &s in &syms {
        for i in step(x, 0, s) {
            for j in step(y, 0, s) {
                if seen.insert((i, j)) {
                    frontier.push((i, j));
                }
            }
        }
    }
    while let Some((i, j)) = frontier.pop() {
        if closure(x, i).contains(&x.len()) && closure(y, j).contains(&y.len()) {
            return true;
        }
        for &s in &syms {
            for ni in step(x, i, s) {
                for nj in step(y, j, s) {
                    if seen.insert((ni, nj)) {
                        frontier.push((ni, nj));
                    }
                }
            }
        }
    }
    false
}

pub fn random_sequence(r: &mut ChaCha8Rng, symbols: u8, max_depth: usize) -> Vec<u8> {
    let n = r.gen_range(1..=max_depth);
    (0..n).map(|_| r.gen_range(0..symbols)).collect()
}

// ---------------------------------------------------------------- netsim

/// Routers 0..4 in a ring with chords, peers 4..7, clients 7..10.
pub fn mixed_ten(sim: &mut Sim, loss: f64, mtu: usize) -> Vec<NodeId> {
    use NodeMode::*;
    let modes = [
        Router, Router, Router, Router, Peer, Peer, Peer, Client, Client, Client,
    ];
    let ids: Vec<NodeId> = modes.iter().map(|m| sim.add_node(*m)).collect();
    let edges = [
        (0, 1, 5),
        (1, 2, 7),
        (2, 3, 5),
        (3, 0, 9),
        (0, 2, 12),
        (4, 0, 3),
        (5, 1, 4),
        (6, 2, 6),
        (4, 5, 8),
        (7, 0, 2),
        (8, 3, 4),
        (9, 1, 3),
        (9, 4, 2),
    ];
    for (a, b, lat) in edges {
        sim.add_link(ids[a], ids[b], LinkParams::new(lat, loss, mtu).unwrap())
            .unwrap();
    }
    ids
}

// ---------------------------------------------------------------- fabric

const FAB_KEYS: [&str; 6] = ["/d/a/x", "/d/a/y", "/d/b/x", "/d/b/y", "/d/c/x", "/e/a/x"];
const FAB_EXPRS: [&str; 7] = [
    "/d/**", "/d/a/*", "/d/*/x", "/d/b/y", "/**", "/*/a/**", "/e/**",
];

struct OracleSub {
    id: vecof::fabric::SubscriptionId,
    expr: KeyExpr,
    expect: Vec<(String, vecof::fabric::Timestamp, SampleKind)>,
}

struct OracleStore {
    id: vecof::fabric::StorageId,
    scope: KeyExpr,
    table: BTreeMap<String, Sample>,
}

/// One randomized put/delete/subscribe/storage/get interleaving checked
/// against a sequential replay. Declarations and gets are barriers; puts and
/// deletes from different nodes overlap in flight.
pub fn fabric_replay_trial(seed: u64) -> Result<usize, String> {
    let mut r = rng(seed);
    let mut sim = Sim::new(seed);
    let modes = [
        NodeMode::Router,
        NodeMode::Router,
        NodeMode::Peer,
        NodeMode::Peer,
        NodeMode::Client,
    ];
    let ids: Vec<NodeId> = modes.iter().map(|m| sim.add_node(*m)).collect();
    let loss = 0.1;
    let mut link = |a: usize, b: usize, r: &mut ChaCha8Rng| {
        sim.add_link(
            ids[a],
            ids[b],
            LinkParams::new(r.gen_range(1..10), loss, 256).unwrap(),
        )
        .unwrap();
    };
    link(0, 1, &mut r);
    link(2, 0, &mut r);
    link(3, 1, &mut r);
    link(4, r.gen_range(0..2), &mut r);
    if r.gen_bool(0.5) {
        link(2, 3, &mut r);
    }
    sim.run_until_idle(u64::MAX);
    let mut f = Fabric::new(sim);
    let ws: Vec<Workspace> = ids.iter().map(|n| f.open_workspace(*n).unwrap()).collect();
    let mut subs: Vec<OracleSub> = Vec::new();
    let mut stores: Vec<OracleStore> = Vec::new();
    let mut checked = 0;
    let ops = r.gen_range(10..30);
    for _ in 0..ops {
        let w = ws[r.gen_range(0..ws.len())];
        let expr: KeyExpr = FAB_EXPRS.choose(&mut r).unwrap().parse().unwrap();
        let key: KeyExpr = FAB_KEYS.choose(&mut r).unwrap().parse().unwrap();
        match r.gen_range(0..10) {
            0 => {
                f.run_until_idle(u64::MAX);
                let id = f
                    .subscribe(w, expr.clone(), Sink::Queue)
                    .map_err(|e| e.to_string())?;
                f.run_until_idle(u64::MAX);
                subs.push(OracleSub {
                    id,
                    expr,
                    expect: vec![],
                });
            }
            1 => {
                f.run_until_idle(u64::MAX);
                let id = f
                    .register_storage(w, expr.clone(), 1)
                    .map_err(|e| e.to_string())?;
                f.run_until_idle(u64::MAX);
                stores.push(OracleStore {
                    id,
                    scope: expr,
                    table: BTreeMap::new(),
                });
            }
            2 => {
                f.run_until_idle(u64::MAX);
                let sel = Selector::new(expr.clone());
                let got = f.get_blocking(w, &sel).map_err(|e| e.to_string())?;
                if got.truncated {
                    return Err(format!("seed {seed}: truncated get"));
                }
                let mut cands = Vec::new();
                for st in &stores {
                    for s in st.table.values() {
                        if s.kind == SampleKind::Put && expr.matches(&s.key).unwrap() {
                            cands.push(Reply {
                                key: s.key.clone(),
                                value: s.value.clone(),
                                ts: s.ts,
                                origin: ReplyOrigin::Storage,
                            });
                        }
                    }
                }
                let want = oracle_consolidate(cands);
                if got.replies != want {
                    return Err(format!(
                        "seed {seed}: get {expr}: got {:?} want {:?}",
                        got.replies, want
                    ));
                }
                // the library's consolidation must agree with the replay's
                if consolidate_replies(got.replies.clone()) != got.replies {
                    return Err(format!("seed {seed}: get result not consolidated"));
                }
                checked += 1;
            }
            k => {
                let (ts, kind, value) = if k == 3 {
                    (
                        f.delete(w, &key).map_err(|e| e.to_string())?,
                        SampleKind::Delete,
                        Value::empty(),
                    )
                } else {
                    let v = Value::text(format!("{seed}-{}", r.gen::<u16>()));
                    (
                        f.put(w, &key, v.clone()).map_err(|e| e.to_string())?,
                        SampleKind::Put,
                        v,
                    )
                };
                let sample = Sample {
                    key: key.clone(),
                    value,
                    ts,
                    kind,
                };
                for s in &mut subs {
                    if s.expr.matches(&key).unwrap() {
                        s.expect.push((key.to_string(), ts, kind));
                    }
                }
                for st in &mut stores {
                    if st.scope.matches(&key).unwrap() {
                        let e = st
                            .table
                            .entry(key.to_string())
                            .or_insert_with(|| sample.clone());
                        if e.ts < ts {
                            *e = sample.clone();
                        }
                    }
                }
                let t = f.now() + r.gen_range(0..6);
                f.step_until(t);
            }
        }
    }
    f.run_until_idle(u64::MAX);
    for s in &mut subs {
        let mut got: Vec<_> = f
            .take_samples(s.id)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|x| (x.key.to_string(), x.ts, x.kind))
            .collect();
        got.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
        s.expect.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
        if got != s.expect {
            return Err(format!(
                "seed {seed}: sub {}: got {got:?} want {:?}",
                s.expr, s.expect
            ));
        }
        checked += 1;
    }
    for st in &stores {
        let got: BTreeMap<String, vecof::fabric::Timestamp> = f
            .storage_table(st.id)
            .into_iter()
            .map(|(k, s)| (k.to_string(), s.ts))
            .collect();
        let want: BTreeMap<String, vecof::fabric::Timestamp> = st
            .table
            .iter()
            .filter(|(_, s)| s.kind == SampleKind::Put)
            .map(|(k, s)| (k.clone(), s.ts))
            .collect();
        if got != want {
            return Err(format!(
                "seed {seed}: storage {}: got {got:?} want {want:?}",
                st.scope
            ));
        }
    }
    Ok(checked)
}

/// Highest-timestamp reply per key, sorted by key.
fn oracle_consolidate(replies: Vec<Reply>) -> Vec<Reply> {
    let mut by_key: BTreeMap<String, Vec<Reply>> = BTreeMap::new();
    for r in replies {
        by_key.entry(r.key.to_string()).or_default().push(r);
    }
    by_key
        .into_values()
        .map(|v| v.into_iter().max_by_key(|r| r.ts).unwrap())
        .collect()
}

// ---------------------------------------------------------------- twins

fn pump_twins(f: &mut Fabric, hub: &mut TwinHub, until: u64) {
    loop {
        let backlog = f.drain_events();
        if !backlog.is_empty() {
            for ev in backlog {
                hub.on_event(&ev);
            }
            hub.poll(f);
            continue;
        }
        if !f.sim().next_event_time().is_some_and(|t| t <= until) {
            break;
        }
        if let Some(evs) = f.step_one() {
            for ev in evs {
                hub.on_event(&ev);
            }
        }
        hub.poll(f);
    }
    if until != u64::MAX {
        f.sim_mut().advance_to(until);
    }
}

/// One randomized schedule of twin writes, partitions and heals. Returns the
/// number of operations executed.
pub fn twin_trial(seed: u64) -> Result<usize, String> {
    let mut r = rng(seed);
    let mut sim = Sim::new(seed);
    let cloud = sim.add_named_node("cloud", NodeMode::Router);
    let edge = sim.add_named_node("edge", NodeMode::Router);
    let car = sim.add_named_node("car", NodeMode::Peer);
    let loss = r.gen_range(0.0..0.3);
    sim.add_link(
        cloud,
        edge,
        LinkParams::new(r.gen_range(5..30), loss, 512).unwrap(),
    )
    .unwrap();
    let last = sim
        .add_link(
            edge,
            car,
            LinkParams::new(r.gen_range(2..15), loss, 512).unwrap(),
        )
        .unwrap();
    sim.run_until_idle(u64::MAX);
    let mut f = Fabric::new(sim);
    let mut hub = TwinHub::new();
    let id = hub
        .create_twin(&mut f, "car", cloud, car)
        .map_err(|e| e.to_string())?;
    pump_twins(&mut f, &mut hub, u64::MAX);
    let mut want: BTreeMap<(Side, String), Value> = BTreeMap::new();
    let mut connected = true;
    let ops = r.gen_range(5..40);
    for _ in 0..ops {
        match r.gen_range(0..10) {
            0 if connected => {
                f.sim_mut().set_link_status(last, LinkStatus::Down).unwrap();
                hub.set_connectivity(&mut f, id, false)
                    .map_err(|e| e.to_string())?;
                connected = false;
            }
            1 if !connected => {
                f.sim_mut().set_link_status(last, LinkStatus::Up).unwrap();
                // the route may take a moment to come back
                let t = f.now() + r.gen_range(0..50);
                pump_twins(&mut f, &mut hub, t);
                hub.set_connectivity(&mut f, id, true)
                    .map_err(|e| e.to_string())?;
                connected = true;
            }
            k => {
                let side = if k % 2 == 0 {
                    Side::Desired
                } else {
                    Side::Reported
                };
                let replica = if side == Side::Desired {
                    Replica::Cloud
                } else {
                    Replica::Vehicle
                };
                let (field, value) = if side == Side::Desired && r.gen_bool(0.5) {
                    let w = WorkloadSpec {
                        id: ["nav", "cam"][r.gen_range(0..2)].to_string(),
                        image: "img".into(),
                        version: format!("1.{}", r.gen_range(0..4)),
                        restart_policy: vecof::twinlcm::RestartPolicy::Always,
                        demand: ResourceVector::new(1, 0, 0),
                    };
                    (w.field_name(), w.to_value())
                } else {
                    (
                        format!("f{}", r.gen_range(0..4)),
                        Value::text(format!("{}", r.gen::<u16>())),
                    )
                };
                hub.twin_write(&mut f, id, side, replica, &field, value.clone())
                    .map_err(|e| e.to_string())?;
                want.insert((side, field), value);
            }
        }
        let t = f.now() + r.gen_range(0..40);
        pump_twins(&mut f, &mut hub, t);
    }
    if !connected {
        f.sim_mut().set_link_status(last, LinkStatus::Up).unwrap();
        let t = f.now() + 100;
        pump_twins(&mut f, &mut hub, t);
        hub.set_connectivity(&mut f, id, true)
            .map_err(|e| e.to_string())?;
    }
    pump_twins(&mut f, &mut hub, u64::MAX);
    if !hub.converged(id) {
        return Err(format!("seed {seed}: replicas differ"));
    }
    for replica in [Replica::Cloud, Replica::Vehicle] {
        let docs = hub.docs(id, replica).unwrap();
        for ((side, field), v) in &want {
            let doc = if *side == Side::Desired {
                &docs.desired
            } else {
                &docs.reported
            };
            let got = doc.get(field).map(|e| &e.value);
            if got != Some(v) {
                return Err(format!(
                    "seed {seed}: {replica:?} {side:?}.{field}: {got:?} want {v:?}"
                ));
            }
        }
    }
    let mut agent = Agent::new(car);
    agent.refresh_desired(&hub.docs(id, Replica::Vehicle).unwrap().desired);
    agent.agent_tick(f.now());
    let again = agent.agent_tick(f.now());
    if !again.is_empty() {
        return Err(format!("seed {seed}: reconciled agent acted: {again:?}"));
    }
    Ok(ops)
}

// ---------------------------------------------------------------- ota

pub struct OtaWorld {
    pub fabric: Fabric,
    pub ota: OtaService,
    pub agents: BTreeMap<NodeId, Agent>,
    pub vehicles: Vec<NodeId>,
    pub kind: TargetKind,
}

pub const OTA_LANES: [&str; 3] = ["v1", "v2", "v3"];

pub fn ota_world(kind: TargetKind, seed: u64) -> OtaWorld {
    let mut sim = Sim::new(seed);
    let cloud = sim.add_named_node("cloud", NodeMode::Router);
    let edge = sim.add_named_node("edge", NodeMode::Router);
    sim.add_link(cloud, edge, LinkParams::new(20, 0.0, 1500).unwrap())
        .unwrap();
    let vehicles: Vec<NodeId> = OTA_LANES
        .iter()
        .map(|name| {
            let v = sim.add_named_node(*name, NodeMode::Peer);
            sim.add_link(edge, v, LinkParams::new(5, 0.1, 512).unwrap())
                .unwrap();
            v
        })
        .collect();
    sim.run_until_idle(u64::MAX);
    let mut fabric = Fabric::new(sim);
    let ws = fabric.open_workspace(edge).unwrap();
    fabric
        .register_storage(ws, "/fleet/**".parse().unwrap(), 1)
        .unwrap();
    let mut ota = OtaService::new(&mut fabric, cloud, edge).unwrap();
    let mut agents = BTreeMap::new();
    for (i, v) in vehicles.iter().enumerate() {
        let key: KeyExpr = format!("/fleet/city/{}", OTA_LANES[i]).parse().unwrap();
        fabric.put(ws, &key, Value::text(OTA_LANES[i])).unwrap();
        let mut a = Agent::new(*v);
        match kind {
            TargetKind::ContainerApp => a.install("nav", "1.0", b"nav-1.0".to_vec()),
            TargetKind::EcuFirmware => a.add_ecu(
                "motor",
                Box::new(SimulatedEcu::new("motor", "1.0", b"fw-1.0".to_vec())),
            ),
        }
        agents.insert(*v, a);
        ota.enroll(*v, 0x5eed ^ (i as u64 * 7919));
    }
    fabric.run_until_idle(u64::MAX);
    let image = b"image-2.0".repeat(120);
    let m = Manifest::for_image(
        "job",
        "/fleet/city/**".parse().unwrap(),
        kind,
        target_name(kind),
        "2.0",
        &image,
    );
    ota.publish_manifest(m, image).unwrap();
    OtaWorld {
        fabric,
        ota,
        agents,
        vehicles,
        kind,
    }
}

pub fn target_name(kind: TargetKind) -> &'static str {
    match kind {
        TargetKind::ContainerApp => "nav",
        TargetKind::EcuFirmware => "motor",
    }
}

impl OtaWorld {
    /// Runs until every lane is terminal and nothing is in flight.
    pub fn run(&mut self) -> Result<(), String> {
        let start = self.fabric.now();
        while let Some(evs) = self.fabric.step_one() {
            for ev in evs {
                self.ota.on_event(&mut self.fabric, &ev, &mut self.agents);
            }
            if self.fabric.now() > start + 600_000 {
                return Err("job did not finish within 600 s".into());
            }
        }
        if !self.ota.all_finished() {
            return Err("queue drained with unfinished lanes".into());
        }
        Ok(())
    }

    /// (version, image) of the update target on lane `i`.
    pub fn installed(&self, i: usize) -> (String, Vec<u8>) {
        let a = &self.agents[&self.vehicles[i]];
        match self.kind {
            TargetKind::ContainerApp => {
                let v = a.running()["nav"].version.clone();
                let img = a.image("nav", &v).map(<[u8]>::to_vec).unwrap_or_default();
                (v, img)
            }
            TargetKind::EcuFirmware => {
                let e = a.ecu("motor").unwrap();
                (e.version().to_string(), e.image().to_vec())
            }
        }
    }

    /// Checks the end state of every lane. Rolled back lanes must hold exactly
    /// the pre-update version and bytes, committed ones the new image.
    pub fn check_lanes(&self) -> Result<(), String> {
        let job = self.ota.job("job").ok_or("job missing")?;
        let new_image = b"image-2.0".repeat(120);
        for (i, lane) in job.lanes.iter().enumerate() {
            let (v, img) = self.installed(i);
            match lane.state {
                LaneState::Committed => {
                    if (v.as_str(), img.as_slice()) != ("2.0", new_image.as_slice()) {
                        return Err(format!("{}: committed but running {v}", lane.target));
                    }
                }
                LaneState::RolledBack => {
                    let old: &[u8] = match self.kind {
                        TargetKind::ContainerApp => b"nav-1.0",
                        TargetKind::EcuFirmware => b"fw-1.0",
                    };
                    if (v.as_str(), img.as_slice()) != ("1.0", old) {
                        return Err(format!("{}: rolled back but running {v}", lane.target));
                    }
                    if self.kind == TargetKind::ContainerApp {
                        let a = &self.agents[&self.vehicles[i]];
                        if a.image("nav", "2.0").is_some() {
                            return Err(format!("{}: new image left behind", lane.target));
                        }
                    }
                }
                s => return Err(format!("{}: ended in {}", lane.target, s.name())),
            }
            if lane.precheck_healthy == Some(false) && lane.entered(LaneState::Updating) {
                return Err(format!(
                    "{}: UPDATING after unhealthy precheck",
                    lane.target
                ));
            }
        }
        Ok(())
    }
}

/// Non-terminal states a lane passes through on the way to COMMITTED.
pub const INJECTABLE: [LaneState; 6] = [
    LaneState::Created,
    LaneState::Distributed,
    LaneState::ChannelReady,
    LaneState::Prechecked,
    LaneState::Updating,
    LaneState::Validating,
];

/// Arms a failure at `state` on lane `lane`; with `again`, a second failure
/// fires once the lane is already rolling back.
pub fn ota_injection_case(
    kind: TargetKind,
    lane: usize,
    state: LaneState,
    again: bool,
    seed: u64,
) -> Result<(), String> {
    let mut w = ota_world(kind, seed);
    w.ota
        .start_update_job(&mut w.fabric, "job")
        .map_err(|e| e.to_string())?;
    let target = OTA_LANES[lane];
    if again {
        w.ota
            .inject_failure(&mut w.fabric, "job", target, Some(LaneState::RollingBack))
            .map_err(|e| e.to_string())?;
    }
    w.ota
        .inject_failure(&mut w.fabric, "job", target, Some(state))
        .map_err(|e| e.to_string())?;
    w.run()?;
    w.check_lanes()?;
    let l = w.ota.job("job").unwrap().lane(target).unwrap();
    let passed = state == LaneState::Created || l.entered(state);
    if l.state != LaneState::RolledBack || !passed {
        return Err(format!(
            "{target}: injected at {} but ended {}",
            state.name(),
            l.state.name()
        ));
    }
    if again {
        let retried = l
            .history
            .iter()
            .any(|t| t.from == LaneState::RollingBack && t.to == LaneState::RollingBack);
        if !retried {
            return Err(format!("{target}: no failure recorded while rolling back"));
        }
    }
    Ok(())
}

pub fn ota_unhealthy_case(kind: TargetKind, lane: usize, seed: u64) -> Result<(), String> {
    let mut w = ota_world(kind, seed);
    let v = w.vehicles[lane];
    w.agents
        .get_mut(&v)
        .unwrap()
        .set_health(target_name(kind), false);
    w.ota
        .start_update_job(&mut w.fabric, "job")
        .map_err(|e| e.to_string())?;
    w.run()?;
    w.check_lanes()?;
    let l = w.ota.job("job").unwrap().lane(OTA_LANES[lane]).unwrap();
    if l.state != LaneState::RolledBack
        || l.precheck_healthy != Some(false)
        || l.entered(LaneState::Updating)
    {
        return Err(format!(
            "{}: unhealthy precheck ended {}",
            l.target,
            l.state.name()
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------- scheduling

pub fn three_sites() -> Vec<ComputeSite> {
    vec![
        ComputeSite::new(
            "veh",
            SiteClass::Vehicle,
            ResourceVector::new(2, 1, 0),
            NodeId(0),
        ),
        ComputeSite::new(
            "mec",
            SiteClass::Edge,
            ResourceVector::new(4, 2, 1),
            NodeId(1),
        ),
        ComputeSite::new(
            "dc",
            SiteClass::Cloud,
            ResourceVector::new(8, 4, 2),
            NodeId(2),
        ),
    ]
}

/// A random DAG of `n` tasks whose demands fit at least one site.
pub fn random_tasks(r: &mut ChaCha8Rng, n: usize) -> Vec<TaskSpec> {
    let mut tasks = Vec::with_capacity(n);
    for i in 0..n {
        let demand =
            ResourceVector::new(r.gen_range(1..=2), r.gen_range(0..=1), r.gen_range(0..=1));
        let mut t = TaskSpec::new(format!("t{i}"), demand);
        let classes = [SiteClass::Vehicle, SiteClass::Edge, SiteClass::Cloud];
        let mut any = false;
        for c in classes {
            let hostable = c != SiteClass::Vehicle || demand.npu == 0;
            if hostable && r.gen_bool(0.7) {
                t = t.on(c, r.gen_range(1..40));
                any = true;
            }
        }
        if !any {
            t = t.on(SiteClass::Cloud, r.gen_range(1..40));
        }
        for j in 0..i {
            if r.gen_bool(0.3) {
                t = t.after(&format!("t{j}"));
            }
        }
        t = t
            .output(r.gen_range(0..50_000))
            .input(r.gen_range(0..20_000));
        if r.gen_bool(0.3) {
            t = t.deadline(r.gen_range(10..200));
        }
        tasks.push(t);
    }
    tasks.shuffle(r);
    tasks
}
