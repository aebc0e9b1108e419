//! Declarative scenario files and their deterministic replay.
//!
//! A scenario is a line-oriented text file. Blank lines and `#` comments are
//! ignored. Declarations come first in any order; timeline events start with
//! `at <ms>`; assertions start with `expect`. The README documents every
//! statement.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::fabric::{Fabric, FabricEvent, QueryId, Sink, SubscriptionId, Workspace};
use crate::hetsched::{
    run_interactive_loop, run_schedule, schedule_eft, submit_dag, ComputeSite, LoopConfig,
    ResourceVector, SiteClass, TaskSpec, TransferModel,
};
use crate::infomodel::{v2x_schemas, FieldSpec, Schema, SimulatedEcu};
use crate::keyspace::{KeyExpr, Selector};
use crate::netsim::{LinkParams, LinkStatus, NetEvent, NodeId, NodeMode, Sim};
use crate::ota::{LaneState, Manifest, OtaService, TargetKind};
use crate::trace::Fnv64;
use crate::twinlcm::{Agent, Replica, Side, TwinHub, TwinId};
use crate::valuecodec::{make_value, EncodingTag, Value};

pub const TRACE_HEADER: &str = "VECOF-TRACE v1";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unresolved reference {id}")]
    UnresolvedReference { line: usize, id: String },
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace sink unavailable: {0}")]
    SinkUnavailable(String),
    #[error("line {line}: {msg}")]
    Setup { line: usize, msg: String },
}

impl ScenarioError {
    pub fn is_parse(&self) -> bool {
        matches!(
            self,
            ScenarioError::Parse { .. }
                | ScenarioError::UnresolvedReference { .. }
                | ScenarioError::Io(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDecl {
    pub name: String,
    pub mode: NodeMode,
    pub role: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkDecl {
    pub a: String,
    pub b: String,
    pub params: LinkParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestDecl {
    pub job: String,
    pub selector: KeyExpr,
    pub kind: TargetKind,
    pub name: String,
    pub version: String,
    pub size: usize,
    pub k_beats: u32,
    pub window_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decl {
    Storage {
        node: String,
        expr: KeyExpr,
        depth: usize,
    },
    Subscribe {
        label: String,
        node: String,
        expr: KeyExpr,
    },
    Eval {
        node: String,
        expr: KeyExpr,
        value: Value,
    },
    Schema(Schema),
    V2xSchemas,
    Twin {
        device: String,
        cloud: String,
    },
    App {
        node: String,
        id: String,
        version: String,
    },
    Ecu {
        node: String,
        id: String,
        version: String,
    },
    Enroll {
        node: String,
        secret: u64,
    },
    Ota {
        cloud: String,
        edge: String,
    },
    Manifest(ManifestDecl),
    Site {
        id: String,
        class: SiteClass,
        node: String,
        capacity: ResourceVector,
    },
    Task {
        dag: String,
        spec: TaskSpec,
    },
    DagOrigin {
        dag: String,
        site: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Put {
        node: String,
        key: KeyExpr,
        value: Value,
    },
    Delete {
        node: String,
        key: KeyExpr,
    },
    Get {
        label: String,
        node: String,
        selector: Selector,
    },
    LinkDown {
        a: String,
        b: String,
    },
    LinkUp {
        a: String,
        b: String,
    },
    StartUpdateJob {
        job: String,
    },
    InjectFailure {
        job: String,
        lane: String,
        state: Option<LaneState>,
    },
    Disconnect {
        device: String,
    },
    Reconnect {
        device: String,
    },
    TwinWrite {
        device: String,
        side: Side,
        field: String,
        value: Value,
    },
    Health {
        node: String,
        id: String,
        healthy: bool,
    },
    Tick {
        node: String,
    },
    RunDag {
        dag: String,
        label: String,
        sites: Vec<String>,
        bandwidth: u64,
    },
    RunLoop {
        trainer: String,
        agents: Vec<String>,
        epochs: u64,
        epoch_ms: u64,
        disconnect: Option<(String, u64, u64)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timed {
    pub time: u64,
    pub line: usize,
    pub event: Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cmp {
    fn parse(s: &str) -> Option<Cmp> {
        Some(match s {
            "==" => Cmp::Eq,
            "!=" => Cmp::Ne,
            "<" => Cmp::Lt,
            "<=" => Cmp::Le,
            ">" => Cmp::Gt,
            ">=" => Cmp::Ge,
            _ => return None,
        })
    }

    fn holds(self, o: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            Cmp::Eq => o == Equal,
            Cmp::Ne => o != Equal,
            Cmp::Lt => o == Less,
            Cmp::Le => o != Greater,
            Cmp::Gt => o == Greater,
            Cmp::Ge => o != Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expectation {
    pub line: usize,
    pub metric: String,
    pub op: Cmp,
    /// A number, a metric name, or a literal word.
    pub rhs: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub name: String,
    pub nodes: Vec<NodeDecl>,
    pub links: Vec<LinkDecl>,
    pub decls: Vec<(usize, Decl)>,
    pub timeline: Vec<Timed>,
    pub expectations: Vec<Expectation>,
    pub horizon_ms: Option<u64>,
}

impl Scenario {
    pub fn nodes_with_role(&self, role: &str) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.role.as_deref() == Some(role))
            .count()
    }
}

struct Line<'a> {
    no: usize,
    toks: Vec<&'a str>,
    raw: &'a str,
}

impl<'a> Line<'a> {
    fn err(&self, msg: impl Into<String>) -> ScenarioError {
        ScenarioError::Parse {
            line: self.no,
            msg: msg.into(),
        }
    }

    fn tok(&self, i: usize, what: &str) -> Result<&'a str, ScenarioError> {
        self.toks
            .get(i)
            .copied()
            .ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn opts(&self, from: usize) -> Result<BTreeMap<&'a str, &'a str>, ScenarioError> {
        self.toks[from.min(self.toks.len())..]
            .iter()
            .map(|t| {
                t.split_once('=')
                    .ok_or_else(|| self.err(format!("expected key=value, got {t:?}")))
            })
            .collect()
    }

    /// Everything after the first `n` tokens, verbatim.
    fn rest(&self, n: usize) -> &'a str {
        let mut s = self.raw.trim_start();
        for _ in 0..n {
            s = s.trim_start();
            let end = s.find(char::is_whitespace).unwrap_or(s.len());
            s = &s[end..];
        }
        s.trim()
    }

    fn key(&self, i: usize) -> Result<KeyExpr, ScenarioError> {
        let t = self.tok(i, "key expression")?;
        t.parse().map_err(|e| self.err(format!("{t}: {e}")))
    }

    fn num<T: std::str::FromStr>(&self, s: &str, what: &str) -> Result<T, ScenarioError> {
        s.parse().map_err(|_| self.err(format!("bad {what} {s:?}")))
    }

    /// `<TAG> <payload>` from token `i` to the end of the line.
    fn value(&self, i: usize) -> Result<Value, ScenarioError> {
        let tag: EncodingTag = self
            .tok(i, "encoding")?
            .parse()
            .map_err(|e| self.err(format!("{e}")))?;
        let payload = self.rest(i + 1).replace("\\n", "\n");
        make_value(tag, payload).map_err(|e| self.err(format!("{e}")))
    }
}

fn parse_demand(l: &Line, opts: &BTreeMap<&str, &str>) -> Result<ResourceVector, ScenarioError> {
    let get = |k: &str| opts.get(k).map_or(Ok(0), |v| l.num::<u32>(v, k));
    Ok(ResourceVector::new(get("cpu")?, get("gpu")?, get("npu")?))
}

/// Parses scenario text and cross-checks every reference.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut sc = Scenario::default();
    let mut seen_header = false;
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let stripped = raw.trim();
        if stripped.is_empty() || stripped.starts_with('#') {
            continue;
        }
        let l = Line {
            no,
            toks: stripped.split_whitespace().collect(),
            raw: stripped,
        };
        if !seen_header {
            if l.toks[0] != "scenario" {
                return Err(l.err("file must start with `scenario <name>`"));
            }
            sc.name = l.tok(1, "scenario name")?.to_string();
            seen_header = true;
            continue;
        }
        match l.toks[0] {
            "node" => {
                let mode: NodeMode = l
                    .tok(2, "mode")?
                    .parse()
                    .map_err(|e| l.err(format!("{e}")))?;
                let opts = l.opts(3)?;
                sc.nodes.push(NodeDecl {
                    name: l.tok(1, "node name")?.to_string(),
                    mode,
                    role: opts.get("role").map(|s| s.to_string()),
                });
            }
            "link" => {
                let opts = l.opts(3)?;
                let latency = l.num(
                    opts.get("latency")
                        .ok_or_else(|| l.err("missing latency"))?,
                    "latency",
                )?;
                let loss = opts.get("loss").map_or(Ok(0.0), |v| l.num(v, "loss"))?;
                let mtu = opts.get("mtu").map_or(Ok(1500), |v| l.num(v, "mtu"))?;
                sc.links.push(LinkDecl {
                    a: l.tok(1, "endpoint")?.to_string(),
                    b: l.tok(2, "endpoint")?.to_string(),
                    params: LinkParams::new(latency, loss, mtu)
                        .map_err(|e| l.err(format!("{e}")))?,
                });
            }
            "horizon" => sc.horizon_ms = Some(l.num(l.tok(1, "horizon")?, "horizon")?),
            "storage" => {
                let opts = l.opts(3)?;
                let depth = opts.get("depth").map_or(Ok(1), |v| l.num(v, "depth"))?;
                sc.decls.push((
                    no,
                    Decl::Storage {
                        node: l.tok(1, "node")?.into(),
                        expr: l.key(2)?,
                        depth,
                    },
                ));
            }
            "subscribe" => sc.decls.push((
                no,
                Decl::Subscribe {
                    label: l.tok(1, "label")?.into(),
                    node: l.tok(2, "node")?.into(),
                    expr: l.key(3)?,
                },
            )),
            "eval" => sc.decls.push((
                no,
                Decl::Eval {
                    node: l.tok(1, "node")?.into(),
                    expr: l.key(2)?,
                    value: l.value(3)?,
                },
            )),
            "schema" => {
                let fields = l.toks[2..]
                    .iter()
                    .map(|f| f.parse::<FieldSpec>().map_err(|e| l.err(format!("{e}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                let schema = Schema::new(l.key(1)?, fields).map_err(|e| l.err(format!("{e}")))?;
                sc.decls.push((no, Decl::Schema(schema)));
            }
            "v2x_schemas" => sc.decls.push((no, Decl::V2xSchemas)),
            "twin" => sc.decls.push((
                no,
                Decl::Twin {
                    device: l.tok(1, "device")?.into(),
                    cloud: l.tok(2, "cloud node")?.into(),
                },
            )),
            "app" | "ecu" => {
                let (node, id, version) = (
                    l.tok(1, "node")?.into(),
                    l.tok(2, "id")?.into(),
                    l.tok(3, "version")?.into(),
                );
                sc.decls.push((
                    no,
                    if l.toks[0] == "app" {
                        Decl::App { node, id, version }
                    } else {
                        Decl::Ecu { node, id, version }
                    },
                ));
            }
            "enroll" => sc.decls.push((
                no,
                Decl::Enroll {
                    node: l.tok(1, "node")?.into(),
                    secret: l.num(l.tok(2, "secret")?, "secret")?,
                },
            )),
            "ota" => sc.decls.push((
                no,
                Decl::Ota {
                    cloud: l.tok(1, "cloud node")?.into(),
                    edge: l.tok(2, "edge node")?.into(),
                },
            )),
            "manifest" => {
                let opts = l.opts(6)?;
                let kind: TargetKind = l
                    .tok(3, "kind")?
                    .parse()
                    .map_err(|e| l.err(format!("{e}")))?;
                let k_beats: u32 = opts.get("k_beats").map_or(Ok(3), |v| l.num(v, "k_beats"))?;
                if k_beats == 0 {
                    return Err(l.err("k_beats must be at least 1"));
                }
                sc.decls.push((
                    no,
                    Decl::Manifest(ManifestDecl {
                        job: l.tok(1, "job id")?.into(),
                        selector: l.key(2)?,
                        kind,
                        name: l.tok(4, "artifact name")?.into(),
                        version: l.tok(5, "artifact version")?.into(),
                        size: opts.get("size").map_or(Ok(4096), |v| l.num(v, "size"))?,
                        k_beats,
                        window_ms: opts
                            .get("window_ms")
                            .map_or(Ok(5000), |v| l.num(v, "window_ms"))?,
                    }),
                ));
            }
            "site" => {
                let class: SiteClass = l
                    .tok(2, "class")?
                    .parse()
                    .map_err(|e| l.err(format!("{e}")))?;
                let opts = l.opts(4)?;
                sc.decls.push((
                    no,
                    Decl::Site {
                        id: l.tok(1, "site id")?.into(),
                        class,
                        node: l.tok(3, "node")?.into(),
                        capacity: parse_demand(&l, &opts)?,
                    },
                ));
            }
            "task" => {
                let opts = l.opts(3)?;
                let mut spec = TaskSpec::new(l.tok(2, "task id")?, parse_demand(&l, &opts)?);
                for (k, v) in &opts {
                    match *k {
                        "cpu" | "gpu" | "npu" => {}
                        "VEHICLE" | "EDGE" | "CLOUD" => {
                            spec.duration_ms
                                .insert(k.parse().expect("matched"), l.num(v, "duration")?);
                        }
                        "after" => spec.deps = v.split(',').map(str::to_string).collect(),
                        "out" => spec.output_bytes = l.num(v, "out")?,
                        "in" => spec.input_bytes = l.num(v, "in")?,
                        "deadline" => spec.deadline_ms = Some(l.num(v, "deadline")?),
                        _ => return Err(l.err(format!("unknown task option {k}"))),
                    }
                }
                sc.decls.push((
                    no,
                    Decl::Task {
                        dag: l.tok(1, "dag")?.into(),
                        spec,
                    },
                ));
            }
            "dag" => {
                let opts = l.opts(2)?;
                let site = opts.get("origin").ok_or_else(|| l.err("missing origin"))?;
                sc.decls.push((
                    no,
                    Decl::DagOrigin {
                        dag: l.tok(1, "dag")?.into(),
                        site: site.to_string(),
                    },
                ));
            }
            "at" => {
                let time = l.num(l.tok(1, "time")?, "time")?;
                let event = parse_event(&l)?;
                sc.timeline.push(Timed {
                    time,
                    line: no,
                    event,
                });
            }
            "expect" => {
                let op =
                    Cmp::parse(l.tok(2, "comparison")?).ok_or_else(|| l.err("bad comparison"))?;
                sc.expectations.push(Expectation {
                    line: no,
                    metric: l.tok(1, "metric")?.into(),
                    op,
                    rhs: l.tok(3, "expected value")?.into(),
                    text: l.rest(1).to_string(),
                });
            }
            other => return Err(l.err(format!("unknown statement {other:?}"))),
        }
    }
    if !seen_header {
        return Err(ScenarioError::Parse {
            line: 0,
            msg: "empty scenario".into(),
        });
    }
    sc.timeline.sort_by_key(|t| t.time);
    validate(&sc)?;
    Ok(sc)
}

fn parse_event(l: &Line) -> Result<Event, ScenarioError> {
    let t = |i| l.tok(i, "argument");
    let s = |i| -> Result<String, ScenarioError> { Ok(t(i)?.to_string()) };
    Ok(match t(2)? {
        "put" => Event::Put {
            node: s(3)?,
            key: l.key(4)?,
            value: l.value(5)?,
        },
        "delete" => Event::Delete {
            node: s(3)?,
            key: l.key(4)?,
        },
        "get" => Event::Get {
            label: s(3)?,
            node: s(4)?,
            selector: t(5)?.parse().map_err(|e| l.err(format!("{e}")))?,
        },
        "link_down" => Event::LinkDown { a: s(3)?, b: s(4)? },
        "link_up" => Event::LinkUp { a: s(3)?, b: s(4)? },
        "start_update_job" => Event::StartUpdateJob { job: s(3)? },
        "inject_failure" => Event::InjectFailure {
            job: s(3)?,
            lane: s(4)?,
            state: match l.toks.get(5) {
                Some(st) => Some(st.parse().map_err(|e| l.err(format!("{e}")))?),
                None => None,
            },
        },
        "disconnect" => Event::Disconnect { device: s(3)? },
        "reconnect" => Event::Reconnect { device: s(3)? },
        "twin_write" => Event::TwinWrite {
            device: s(3)?,
            side: match t(4)? {
                "desired" => Side::Desired,
                "reported" => Side::Reported,
                x => return Err(l.err(format!("bad twin side {x:?}"))),
            },
            field: s(5)?,
            value: l.value(6)?,
        },
        "health" => Event::Health {
            node: s(3)?,
            id: s(4)?,
            healthy: match t(5)? {
                "up" => true,
                "down" => false,
                x => return Err(l.err(format!("health must be up or down, got {x:?}"))),
            },
        },
        "tick" => Event::Tick { node: s(3)? },
        "run_dag" => {
            let opts = l.opts(5)?;
            Event::RunDag {
                dag: s(3)?,
                label: s(4)?,
                sites: opts
                    .get("sites")
                    .ok_or_else(|| l.err("missing sites"))?
                    .split(',')
                    .map(str::to_string)
                    .collect(),
                bandwidth: opts
                    .get("bandwidth")
                    .map_or(Ok(1_000_000), |v| l.num(v, "bandwidth"))?,
            }
        }
        "run_loop" => {
            let opts = l.opts(5)?;
            let disconnect = match opts.get("disconnect") {
                None => None,
                Some(d) => {
                    let parts: Vec<&str> = d.split(':').collect();
                    if parts.len() != 3 {
                        return Err(l.err("disconnect must be agent:first:last"));
                    }
                    Some((
                        parts[0].to_string(),
                        l.num(parts[1], "epoch")?,
                        l.num(parts[2], "epoch")?,
                    ))
                }
            };
            Event::RunLoop {
                trainer: s(3)?,
                agents: t(4)?.split(',').map(str::to_string).collect(),
                epochs: opts.get("epochs").map_or(Ok(10), |v| l.num(v, "epochs"))?,
                epoch_ms: opts
                    .get("epoch_ms")
                    .map_or(Ok(100), |v| l.num(v, "epoch_ms"))?,
                disconnect,
            }
        }
        other => return Err(l.err(format!("unknown event {other:?}"))),
    })
}

fn validate(sc: &Scenario) -> Result<(), ScenarioError> {
    let mut nodes = BTreeSet::new();
    for n in &sc.nodes {
        if !nodes.insert(n.name.as_str()) {
            return Err(ScenarioError::Parse {
                line: 0,
                msg: format!("duplicate node {}", n.name),
            });
        }
    }
    let unresolved = |line: usize, id: &str| ScenarioError::UnresolvedReference {
        line,
        id: id.to_string(),
    };
    let node = |line: usize, id: &str| {
        if nodes.contains(id) {
            Ok(())
        } else {
            Err(unresolved(line, id))
        }
    };
    for l in &sc.links {
        node(0, &l.a)?;
        node(0, &l.b)?;
    }
    let mut twins = BTreeSet::new();
    let mut jobs = BTreeSet::new();
    let mut sites = BTreeSet::new();
    let mut dags = BTreeSet::new();
    let mut has_ota = false;
    for (line, d) in &sc.decls {
        let line = *line;
        match d {
            Decl::Storage { node: n, .. }
            | Decl::Subscribe { node: n, .. }
            | Decl::Eval { node: n, .. } => node(line, n)?,
            Decl::App { node: n, .. }
            | Decl::Ecu { node: n, .. }
            | Decl::Enroll { node: n, .. } => node(line, n)?,
            Decl::Twin { device, cloud } => {
                node(line, device)?;
                node(line, cloud)?;
                twins.insert(device.as_str());
            }
            Decl::Ota { cloud, edge } => {
                node(line, cloud)?;
                node(line, edge)?;
                has_ota = true;
            }
            Decl::Manifest(m) => {
                jobs.insert(m.job.as_str());
            }
            Decl::Site { id, node: n, .. } => {
                node(line, n)?;
                sites.insert(id.as_str());
            }
            Decl::Task { dag, .. } => {
                dags.insert(dag.as_str());
            }
            Decl::DagOrigin { .. } | Decl::Schema(_) | Decl::V2xSchemas => {}
        }
    }
    for (line, d) in &sc.decls {
        if let Decl::DagOrigin { dag, site } = d {
            if !dags.contains(dag.as_str()) {
                return Err(unresolved(*line, dag));
            }
            if !sites.contains(site.as_str()) {
                return Err(unresolved(*line, site));
            }
        }
        if let Decl::Manifest(m) = d {
            if !has_ota {
                return Err(unresolved(*line, &format!("ota service for {}", m.job)));
            }
        }
    }
    for t in &sc.timeline {
        let line = t.line;
        match &t.event {
            Event::Put { node: n, .. }
            | Event::Delete { node: n, .. }
            | Event::Get { node: n, .. } => node(line, n)?,
            Event::Health { node: n, .. } | Event::Tick { node: n } => node(line, n)?,
            Event::LinkDown { a, b } | Event::LinkUp { a, b } => {
                node(line, a)?;
                node(line, b)?;
                if !sc
                    .links
                    .iter()
                    .any(|l| (l.a == *a && l.b == *b) || (l.a == *b && l.b == *a))
                {
                    return Err(unresolved(line, &format!("link {a}-{b}")));
                }
            }
            Event::StartUpdateJob { job } => {
                if !jobs.contains(job.as_str()) {
                    return Err(unresolved(line, job));
                }
            }
            Event::InjectFailure { job, lane, .. } => {
                if !jobs.contains(job.as_str()) {
                    return Err(unresolved(line, job));
                }
                node(line, lane)?;
            }
            Event::Disconnect { device } | Event::Reconnect { device } => node(line, device)?,
            Event::TwinWrite { device, .. } => {
                if !twins.contains(device.as_str()) {
                    return Err(unresolved(line, device));
                }
            }
            Event::RunDag { dag, sites: s, .. } => {
                if !dags.contains(dag.as_str()) {
                    return Err(unresolved(line, dag));
                }
                for site in s {
                    if !sites.contains(site.as_str()) {
                        return Err(unresolved(line, site));
                    }
                }
            }
            Event::RunLoop {
                trainer,
                agents,
                disconnect,
                ..
            } => {
                node(line, trainer)?;
                for a in agents {
                    node(line, a)?;
                }
                if let Some((a, _, _)) = disconnect {
                    if !agents.contains(a) {
                        return Err(unresolved(line, a));
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    parse_scenario(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    Num(f64),
    Text(String),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Num(x) if x.fract() == 0.0 && x.abs() < 1e15 => write!(f, "{}", *x as i64),
            Metric::Num(x) => write!(f, "{x:.6}"),
            Metric::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssertionResult {
    pub text: String,
    pub passed: bool,
    pub actual: String,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    /// FNV-1a over the event lines of the trace.
    pub trace_hash: u64,
    pub lines: Vec<String>,
    pub metrics: BTreeMap<String, Metric>,
    pub assertions: Vec<AssertionResult>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn metric(&self, key: &str) -> Option<&Metric> {
        self.metrics.get(key)
    }

    pub fn render_metrics(&self) -> String {
        let mut out = String::from("METRICS\n");
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k} {v}\n"));
        }
        for a in &self.assertions {
            let verdict = if a.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!(
                "ASSERT {verdict} {} actual={}\n",
                a.text, a.actual
            ));
        }
        out.push_str(&format!("END hash={:016x}\n", self.trace_hash));
        out
    }

    /// Header, event lines (when kept) and the metrics block.
    pub fn render_trace(&self) -> String {
        let mut out = format!(
            "{TRACE_HEADER} scenario={} seed={}\n",
            self.scenario, self.seed
        );
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out.push_str(&self.render_metrics());
        out
    }

    pub fn emit_trace<W: Write>(&self, mut sink: W) -> Result<(), ScenarioError> {
        sink.write_all(self.render_trace().as_bytes())
            .map_err(|e| ScenarioError::SinkUnavailable(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    /// Keep trace lines in the report; the hash is computed either way.
    pub keep_lines: bool,
}

struct Runtime {
    fabric: Fabric,
    names: BTreeMap<String, NodeId>,
    ws: BTreeMap<NodeId, Workspace>,
    hub: TwinHub,
    twins: BTreeMap<String, TwinId>,
    agents: BTreeMap<NodeId, Agent>,
    ota: Option<OtaService>,
    subs: BTreeMap<SubscriptionId, String>,
    queries: BTreeMap<QueryId, String>,
    metrics: BTreeMap<String, Metric>,
    sites: BTreeMap<String, ComputeSite>,
    dags: BTreeMap<String, (Vec<TaskSpec>, Option<String>)>,
    usage: BTreeMap<&'static str, u64>,
}

fn setup_err(line: usize, e: impl fmt::Display) -> ScenarioError {
    ScenarioError::Setup {
        line,
        msg: e.to_string(),
    }
}

impl Runtime {
    fn node(&self, name: &str) -> NodeId {
        self.names[name]
    }

    fn ws(&mut self, node: NodeId) -> Workspace {
        if let Some(w) = self.ws.get(&node) {
            return *w;
        }
        let w = self.fabric.open_workspace(node).expect("declared node");
        self.ws.insert(node, w);
        w
    }

    fn used(&mut self, module: &'static str, n: u64) {
        *self.usage.entry(module).or_default() += n;
    }

    fn bump(&mut self, key: String, by: f64) {
        let e = self.metrics.entry(key).or_insert(Metric::Num(0.0));
        if let Metric::Num(x) = e {
            *x += by;
        }
    }

    fn set(&mut self, key: String, v: Metric) {
        self.metrics.insert(key, v);
    }

    fn dispatch(&mut self, evs: Vec<FabricEvent>) {
        for ev in evs {
            if self.hub.on_event(&ev) {
                continue;
            }
            if let Some(ota) = self.ota.as_mut() {
                if ota.on_event(&mut self.fabric, &ev, &mut self.agents) {
                    continue;
                }
            }
            match ev {
                FabricEvent::Sample { sub, .. } => {
                    if let Some(label) = self.subs.get(&sub).cloned() {
                        self.bump(format!("sub.{label}.received"), 1.0);
                    }
                }
                FabricEvent::QueryDone { query, result } => {
                    if let Some(label) = self.queries.remove(&query) {
                        self.set(
                            format!("get.{label}.replies"),
                            Metric::Num(result.replies.len() as f64),
                        );
                        self.set(
                            format!("get.{label}.missing"),
                            Metric::Num(result.missing.len() as f64),
                        );
                    }
                }
                FabricEvent::Net(NetEvent::Unreachable { .. }) => {
                    self.bump("net.unreachable".into(), 1.0)
                }
                FabricEvent::Net(_) => {}
            }
        }
        for r in self.hub.poll(&mut self.fabric) {
            self.record_sync(&r);
        }
    }

    fn record_sync(&mut self, r: &crate::twinlcm::SyncReport) {
        self.used("twinlcm", 1);
        self.bump(format!("twin.{}.syncs", r.device), 1.0);
        self.bump(
            format!("twin.{}.transferred", r.device),
            r.transferred() as f64,
        );
        self.bump(format!("twin.{}.flushed", r.device), r.flushed.len() as f64);
    }

    /// Processes everything scheduled up to `t`, then sets the clock to `t`.
    fn advance(&mut self, t: u64) {
        loop {
            let backlog = self.fabric.drain_events();
            if !backlog.is_empty() {
                self.dispatch(backlog);
                continue;
            }
            if !self.fabric.sim().next_event_time().is_some_and(|n| n <= t) {
                break;
            }
            if let Some(evs) = self.fabric.step_one() {
                self.dispatch(evs);
            }
        }
        self.fabric.sim_mut().advance_to(t);
    }

    fn set_links(&mut self, a: NodeId, b: Option<NodeId>, status: LinkStatus) {
        let ids: Vec<_> = self
            .fabric
            .sim()
            .link_ids()
            .filter(|l| {
                let (x, y, _, _) = self.fabric.sim().link(*l).expect("listed");
                match b {
                    Some(b) => (x == a && y == b) || (x == b && y == a),
                    None => x == a || y == a,
                }
            })
            .collect();
        for l in ids {
            self.fabric
                .sim_mut()
                .set_link_status(l, status)
                .expect("listed link");
        }
    }

    fn apply(&mut self, t: &Timed) -> Result<(), ScenarioError> {
        let line = t.line;
        match &t.event {
            Event::Put { node, key, value } => {
                let ws = self.ws(self.node(node));
                self.used("keyspace", 1);
                self.used("valuecodec", 1);
                // schema rejections are counted by the fabric and traced
                let _ = self.fabric.put(ws, key, value.clone());
            }
            Event::Delete { node, key } => {
                let ws = self.ws(self.node(node));
                self.fabric
                    .delete(ws, key)
                    .map_err(|e| setup_err(line, e))?;
            }
            Event::Get {
                label,
                node,
                selector,
            } => {
                let ws = self.ws(self.node(node));
                let q = self
                    .fabric
                    .get(ws, selector)
                    .map_err(|e| setup_err(line, e))?;
                self.queries.insert(q, label.clone());
            }
            Event::LinkDown { a, b } => {
                self.set_links(self.node(a), Some(self.node(b)), LinkStatus::Down)
            }
            Event::LinkUp { a, b } => {
                self.set_links(self.node(a), Some(self.node(b)), LinkStatus::Up)
            }
            Event::StartUpdateJob { job } => {
                let ota = self.ota.as_mut().expect("validated");
                if let Err(e) = ota.start_update_job(&mut self.fabric, job) {
                    self.set(format!("ota.{job}.error"), Metric::Text(e.to_string()));
                }
                // get_blocking may have stepped the clock past events owned by others
                let evs = self.fabric.drain_events();
                self.dispatch(evs);
            }
            Event::InjectFailure { job, lane, state } => {
                let ota = self.ota.as_mut().expect("validated");
                ota.inject_failure(&mut self.fabric, job, lane, *state)
                    .map_err(|e| setup_err(line, e))?;
            }
            Event::Disconnect { device } => {
                let n = self.node(device);
                self.set_links(n, None, LinkStatus::Down);
                if let Some(a) = self.agents.get_mut(&n) {
                    a.set_connected(false);
                }
                if let Some(&id) = self.twins.get(device) {
                    self.hub
                        .set_connectivity(&mut self.fabric, id, false)
                        .map_err(|e| setup_err(line, e))?;
                }
            }
            Event::Reconnect { device } => {
                let n = self.node(device);
                self.set_links(n, None, LinkStatus::Up);
                if let Some(a) = self.agents.get_mut(&n) {
                    a.set_connected(true);
                }
                if let Some(&id) = self.twins.get(device) {
                    if let Some(r) = self
                        .hub
                        .set_connectivity(&mut self.fabric, id, true)
                        .map_err(|e| setup_err(line, e))?
                    {
                        self.record_sync(&r);
                    }
                }
            }
            Event::TwinWrite {
                device,
                side,
                field,
                value,
            } => {
                let id = self.twins[device];
                let replica = match side {
                    Side::Desired => Replica::Cloud,
                    Side::Reported => Replica::Vehicle,
                };
                self.used("twinlcm", 1);
                self.hub
                    .twin_write(&mut self.fabric, id, *side, replica, field, value.clone())
                    .map_err(|e| setup_err(line, e))?;
            }
            Event::Health { node, id, healthy } => {
                let n = self.node(node);
                let ok = self
                    .agents
                    .get_mut(&n)
                    .is_some_and(|a| a.set_health(id, *healthy));
                if !ok {
                    return Err(setup_err(
                        line,
                        format!("no workload or ECU {id} on {node}"),
                    ));
                }
            }
            Event::Tick { node } => {
                let n = self.node(node);
                if let Some(&id) = self.twins.get(node) {
                    let doc = self
                        .hub
                        .docs(id, Replica::Vehicle)
                        .expect("twin exists")
                        .desired
                        .clone();
                    self.agents
                        .entry(n)
                        .or_insert_with(|| Agent::new(n))
                        .refresh_desired(&doc);
                }
                let now = self.fabric.now();
                let agent = self.agents.entry(n).or_insert_with(|| Agent::new(n));
                let actions = agent.agent_tick(now);
                for a in &actions {
                    let l = format!("LCM {now} {node} {a}");
                    self.fabric.sim_mut().trace_mut().record(l);
                }
                self.used("twinlcm", 1);
                self.bump(format!("agent.{node}.actions"), actions.len() as f64);
            }
            Event::RunDag {
                dag,
                label,
                sites,
                bandwidth,
            } => {
                self.used("hetsched", 1);
                let sites: Vec<ComputeSite> = sites.iter().map(|s| self.sites[s].clone()).collect();
                let (tasks, origin) = self.dags[dag].clone();
                let mut d = submit_dag(tasks, &sites).map_err(|e| setup_err(line, e))?;
                if let Some(o) = origin.filter(|o| sites.iter().any(|s| s.id == *o)) {
                    d = d.with_origin(&o);
                }
                let model = TransferModel::from_sim(&sites, self.fabric.sim(), *bandwidth);
                let plan = schedule_eft(&d, &sites, &model);
                let run = run_schedule(&mut self.fabric, &d, &sites, &model, &plan)
                    .map_err(|e| setup_err(line, e))?;
                let now = self.fabric.now();
                for (task, p) in &run.realized {
                    let l = format!(
                        "SCHED {now} {label} {task} {} {} {}",
                        p.site, p.start_ms, p.end_ms
                    );
                    self.fabric.sim_mut().trace_mut().record(l);
                }
                for task in &run.missed {
                    let l = format!("SCHED {now} {label} {task} MISSED");
                    self.fabric.sim_mut().trace_mut().record(l);
                }
                self.set(
                    format!("dag.{label}.planned_makespan_ms"),
                    Metric::Num(plan.makespan_ms() as f64),
                );
                self.set(
                    format!("dag.{label}.planned_miss_ratio"),
                    Metric::Num(plan.deadline_miss_ratio(&d)),
                );
                self.set(
                    format!("dag.{label}.makespan_ms"),
                    Metric::Num(run.makespan_ms as f64),
                );
                self.set(
                    format!("dag.{label}.miss_ratio"),
                    Metric::Num(run.deadline_miss_ratio),
                );
                self.set(
                    format!("dag.{label}.missed"),
                    Metric::Num(run.missed.len() as f64),
                );
            }
            Event::RunLoop {
                trainer,
                agents,
                epochs,
                epoch_ms,
                disconnect,
            } => {
                self.used("hetsched", 1);
                let ids: Vec<NodeId> = agents.iter().map(|a| self.node(a)).collect();
                let cfg = LoopConfig {
                    epochs: *epochs,
                    epoch_ms: *epoch_ms,
                    disconnect: disconnect.as_ref().map(|(a, f, l)| {
                        (
                            agents.iter().position(|x| x == a).expect("validated"),
                            *f,
                            *l,
                        )
                    }),
                };
                let tr = {
                    let tn = self.node(trainer);
                    run_interactive_loop(&mut self.fabric, tn, &ids, &cfg)
                };
                let monotone = tr
                    .versions
                    .values()
                    .all(|v| v.windows(2).all(|w| w[0] <= w[1]));
                let all_final = tr
                    .versions
                    .values()
                    .all(|v| v.last() == Some(&tr.final_version));
                self.set(
                    "loop.final_version".into(),
                    Metric::Num(tr.final_version as f64),
                );
                self.set(
                    "loop.monotone".into(),
                    Metric::Num(f64::from(u8::from(monotone))),
                );
                self.set(
                    "loop.all_final".into(),
                    Metric::Num(f64::from(u8::from(all_final))),
                );
                self.set(
                    "loop.observations".into(),
                    Metric::Num(tr.observations as f64),
                );
            }
        }
        Ok(())
    }
}

fn image_bytes(name: &str, version: &str, size: usize) -> Vec<u8> {
    let seed = format!("{name}-{version}:");
    seed.bytes().cycle().take(size.max(1)).collect()
}

/// Replays `sc` with `opts.seed` and evaluates its assertions.
pub fn run_scenario(sc: &Scenario, opts: RunOptions) -> Result<RunReport, ScenarioError> {
    let mut sim = Sim::new(opts.seed);
    sim.trace_mut().set_keep(opts.keep_lines);
    let mut names = BTreeMap::new();
    for n in &sc.nodes {
        names.insert(n.name.clone(), sim.add_named_node(n.name.clone(), n.mode));
    }
    for l in &sc.links {
        sim.add_link(names[&l.a], names[&l.b], l.params)
            .map_err(|e| setup_err(0, e))?;
    }
    let mut rt = Runtime {
        fabric: Fabric::new(sim),
        names,
        ws: BTreeMap::new(),
        hub: TwinHub::new(),
        twins: BTreeMap::new(),
        agents: BTreeMap::new(),
        ota: None,
        subs: BTreeMap::new(),
        queries: BTreeMap::new(),
        metrics: BTreeMap::new(),
        sites: BTreeMap::new(),
        dags: BTreeMap::new(),
        usage: BTreeMap::new(),
    };
    // let routing converge before anything else happens
    rt.advance(0);
    rt.fabric.run_until_idle(u64::MAX);
    for (line, d) in &sc.decls {
        let line = *line;
        match d {
            Decl::Storage { node, expr, depth } => {
                let ws = rt.ws(rt.node(node));
                rt.fabric
                    .register_storage(ws, expr.clone(), *depth)
                    .map_err(|e| setup_err(line, e))?;
            }
            Decl::Subscribe { label, node, expr } => {
                let ws = rt.ws(rt.node(node));
                let id = rt
                    .fabric
                    .subscribe(ws, expr.clone(), Sink::Notify(0))
                    .map_err(|e| setup_err(line, e))?;
                rt.subs.insert(id, label.clone());
                rt.set(format!("sub.{label}.received"), Metric::Num(0.0));
            }
            Decl::Eval { node, expr, value } => {
                let ws = rt.ws(rt.node(node));
                let v = value.clone();
                rt.fabric
                    .register_eval(ws, expr.clone(), move |_, _| v.clone())
                    .map_err(|e| setup_err(line, e))?;
            }
            Decl::Schema(s) => {
                rt.used("infomodel", 1);
                rt.fabric
                    .registry_mut()
                    .register_schema(s.clone())
                    .map_err(|e| setup_err(line, e))?;
            }
            Decl::V2xSchemas => {
                for s in v2x_schemas() {
                    rt.used("infomodel", 1);
                    rt.fabric
                        .registry_mut()
                        .register_schema(s)
                        .map_err(|e| setup_err(line, e))?;
                }
            }
            Decl::Twin { device, cloud } => {
                let (c, v) = (rt.node(cloud), rt.node(device));
                let id = rt
                    .hub
                    .create_twin(&mut rt.fabric, device, c, v)
                    .map_err(|e| setup_err(line, e))?;
                rt.twins.insert(device.clone(), id);
            }
            Decl::App { node, id, version } => {
                let n = rt.node(node);
                let image = image_bytes(id, version, 256);
                rt.agents
                    .entry(n)
                    .or_insert_with(|| Agent::new(n))
                    .install(id, version, image);
            }
            Decl::Ecu { node, id, version } => {
                let n = rt.node(node);
                let ecu =
                    SimulatedEcu::new(id.clone(), version.clone(), image_bytes(id, version, 256));
                rt.used("infomodel", 1);
                rt.agents
                    .entry(n)
                    .or_insert_with(|| Agent::new(n))
                    .add_ecu(id, Box::new(ecu));
            }
            Decl::Ota { cloud, edge } => {
                let (c, e) = (rt.node(cloud), rt.node(edge));
                rt.ota =
                    Some(OtaService::new(&mut rt.fabric, c, e).map_err(|e| setup_err(line, e))?);
            }
            Decl::Enroll { .. } | Decl::Manifest(_) => {}
            Decl::Site {
                id,
                class,
                node,
                capacity,
            } => {
                let site = ComputeSite::new(id.clone(), *class, *capacity, rt.node(node));
                rt.sites.insert(id.clone(), site);
            }
            Decl::Task { dag, spec } => {
                rt.dags.entry(dag.clone()).or_default().0.push(spec.clone())
            }
            Decl::DagOrigin { dag, site } => {
                rt.dags.entry(dag.clone()).or_default().1 = Some(site.clone())
            }
        }
    }
    for (line, d) in &sc.decls {
        match d {
            Decl::Enroll { node, secret } => {
                let n = rt.node(node);
                match rt.ota.as_mut() {
                    Some(o) => o.enroll(n, *secret),
                    None => return Err(setup_err(*line, "enroll needs an ota declaration")),
                }
            }
            Decl::Manifest(m) => {
                let image = image_bytes(&m.name, &m.version, m.size);
                let mut mf = Manifest::for_image(
                    &m.job,
                    m.selector.clone(),
                    m.kind,
                    &m.name,
                    &m.version,
                    &image,
                );
                mf.k_beats = m.k_beats;
                mf.window_ms = m.window_ms;
                let ota = rt.ota.as_mut().expect("validated");
                ota.publish_manifest(mf, image)
                    .map_err(|e| setup_err(*line, e))?;
            }
            _ => {}
        }
    }
    let start = rt.fabric.now();
    for t in &sc.timeline {
        rt.advance(start + t.time);
        rt.apply(t)?;
    }
    let last = sc.timeline.last().map_or(0, |t| t.time);
    let horizon = start + sc.horizon_ms.unwrap_or(last + 120_000);
    rt.advance(horizon);
    finish(rt, sc, opts)
}

fn finish(mut rt: Runtime, sc: &Scenario, opts: RunOptions) -> Result<RunReport, ScenarioError> {
    let sim_stats = rt.fabric.sim().stats().clone();
    let frames: u64 = sim_stats.frames_sent.values().sum();
    rt.used("netsim", frames);
    let fs = rt.fabric.stats().clone();
    rt.used("fabric", fs.puts + fs.queries + fs.deliveries);
    rt.used("infomodel", fs.rejected_puts);
    rt.set("net.frames_sent".into(), Metric::Num(frames as f64));
    rt.set(
        "net.delivered".into(),
        Metric::Num(sim_stats.delivered as f64),
    );
    rt.set(
        "net.frames_lost".into(),
        Metric::Num(sim_stats.frames_lost as f64),
    );
    rt.set(
        "net.retransmissions".into(),
        Metric::Num((sim_stats.link_retransmissions + sim_stats.e2e_retransmissions) as f64),
    );
    rt.set("fabric.puts".into(), Metric::Num(fs.puts as f64));
    rt.set(
        "fabric.deliveries".into(),
        Metric::Num(fs.deliveries as f64),
    );
    rt.set("fabric.queries".into(), Metric::Num(fs.queries as f64));
    rt.set(
        "fabric.rejected_puts".into(),
        Metric::Num(fs.rejected_puts as f64),
    );
    let twins: Vec<(String, TwinId)> = rt.twins.iter().map(|(k, v)| (k.clone(), *v)).collect();
    for (dev, id) in twins {
        let c = rt.hub.converged(id);
        rt.set(
            format!("twin.{dev}.converged"),
            Metric::Num(f64::from(u8::from(c))),
        );
    }
    if let Some(ota) = &rt.ota {
        let mut out = Vec::new();
        let mut transitions = 0;
        for job in ota.jobs() {
            for lane in &job.lanes {
                transitions += lane.history.len() as u64;
                out.push((
                    format!("ota.{}.{}", job.manifest.job_id, lane.target),
                    lane.state.name().to_string(),
                ));
                if let Some(r) = &lane.failure_reason {
                    out.push((
                        format!("ota.{}.{}.reason", job.manifest.job_id, lane.target),
                        r.clone(),
                    ));
                }
            }
        }
        rt.used("ota", transitions);
        for (k, v) in out {
            rt.set(k, Metric::Text(v));
        }
    }
    let names: BTreeMap<NodeId, String> = rt.names.iter().map(|(k, v)| (*v, k.clone())).collect();
    let mut versions = Vec::new();
    for (n, a) in &rt.agents {
        for (id, r) in a.running() {
            versions.push((format!("app.{}.{id}.version", names[n]), r.version.clone()));
        }
    }
    for (k, v) in versions {
        rt.set(k, Metric::Text(v));
    }
    for module in [
        "keyspace",
        "valuecodec",
        "netsim",
        "fabric",
        "infomodel",
        "twinlcm",
        "ota",
        "hetsched",
    ] {
        let n = rt.usage.get(module).copied().unwrap_or(0);
        rt.set(format!("modules.{module}"), Metric::Num(n as f64));
    }
    let assertions = sc
        .expectations
        .iter()
        .map(|e| check(e, &rt.metrics))
        .collect();
    let trace = rt.fabric.sim().trace();
    Ok(RunReport {
        scenario: sc.name.clone(),
        seed: opts.seed,
        trace_hash: trace.hash(),
        lines: trace.lines().to_vec(),
        metrics: rt.metrics,
        assertions,
    })
}

fn check(e: &Expectation, metrics: &BTreeMap<String, Metric>) -> AssertionResult {
    let fail = |actual: String| AssertionResult {
        text: e.text.clone(),
        passed: false,
        actual,
    };
    let Some(lhs) = metrics.get(&e.metric) else {
        return fail("missing".into());
    };
    let rhs = match (metrics.get(&e.rhs), lhs) {
        (Some(m), _) => m.clone(),
        (None, Metric::Text(_)) => Metric::Text(e.rhs.clone()),
        (None, Metric::Num(_)) => match e.rhs.parse::<f64>() {
            Ok(x) => Metric::Num(x),
            Err(_) => Metric::Text(e.rhs.clone()),
        },
    };
    let ord = match (lhs, &rhs) {
        (Metric::Num(a), Metric::Num(b)) => a.partial_cmp(b),
        (Metric::Text(a), Metric::Text(b)) => Some(a.cmp(b)),
        (a, b) => Some(a.to_string().cmp(&b.to_string())),
    };
    AssertionResult {
        text: e.text.clone(),
        passed: ord.is_some_and(|o| e.op.holds(o)),
        actual: lhs.to_string(),
    }
}

/// Hash of a rendered trace's event lines, for checking a written file.
pub fn hash_trace_text(text: &str) -> u64 {
    let mut h = Fnv64::default();
    for line in text.lines().skip(1).take_while(|l| *l != "METRICS") {
        h.update(line.as_bytes());
        h.update(b"\n");
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "\
scenario tiny
node a PEER role=vehicle
node b ROUTER role=edge
link a b latency=5 loss=0.1 mtu=256
subscribe rx b /demo/**
at 10 put a /demo/x TEXT hello world
at 20 put a /demo/y PROPERTIES k=1;j=2
expect sub.rx.received == 2
expect fabric.puts >= 2
";

    #[test]
    fn parses_and_runs() {
        let sc = parse_scenario(TINY).unwrap();
        assert_eq!(sc.nodes_with_role("vehicle"), 1);
        assert_eq!(sc.timeline.len(), 2);
        let r = run_scenario(
            &sc,
            RunOptions {
                seed: 1,
                keep_lines: true,
            },
        )
        .unwrap();
        assert!(r.passed(), "{}", r.render_metrics());
        let deliveries = r
            .lines
            .iter()
            .filter(|l| l.starts_with("FAB ") && l.contains(" DELIVER "))
            .count();
        assert_eq!(deliveries, 2);
        assert_eq!(hash_trace_text(&r.render_trace()), r.trace_hash);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_scenario(""),
            Err(ScenarioError::Parse { .. })
        ));
        let bad = "scenario x\nnode a PEER\nat 5 put ghost /k TEXT v\n";
        assert!(matches!(
            parse_scenario(bad),
            Err(ScenarioError::UnresolvedReference { line: 3, .. })
        ));
        assert!(matches!(
            parse_scenario("scenario x\nfrobnicate\n"),
            Err(ScenarioError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn empty_scenario_has_header_and_metrics_only() {
        let sc = parse_scenario("scenario empty\n").unwrap();
        let r = run_scenario(
            &sc,
            RunOptions {
                seed: 0,
                keep_lines: true,
            },
        )
        .unwrap();
        assert!(r.lines.is_empty());
        let text = r.render_trace();
        assert!(text.starts_with(TRACE_HEADER));
        assert!(text.contains("\nMETRICS\n"));
    }

    #[test]
    fn failing_expectation_is_reported() {
        let sc = parse_scenario(&TINY.replace("== 2", "== 3")).unwrap();
        let r = run_scenario(
            &sc,
            RunOptions {
                seed: 1,
                keep_lines: false,
            },
        )
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.assertions.iter().filter(|a| !a.passed).count(), 1);
    }
}
