//! DAG scheduling across vehicle, edge and cloud compute sites, execution of
//! a schedule over the simulated network, and the train/serve policy loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{Fabric, FabricEvent, TIMER_LAYER_SHIFT};
use crate::netsim::{LinkStatus, NetEvent, NodeId, Sim};

pub const CH_SCHED: u16 = 3;
pub const CH_LOOP: u16 = 4;
const TOKEN_LAYER_SCHED: u64 = 3;
const TOKEN_LAYER_LOOP: u64 = 4;
pub const BRUTE_FORCE_LIMIT: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedError {
    #[error("dependency cycle through task {0}")]
    CycleDetected(String),
    #[error("no site can ever host task {0}")]
    UnsatisfiableDemand(String),
    #[error("task {task} depends on unknown task {dep}")]
    UnknownDependency { task: String, dep: String },
    #[error("duplicate task id {0}")]
    DuplicateTask(String),
    #[error("unknown site {0}")]
    UnknownSite(String),
    #[error("brute force is limited to {BRUTE_FORCE_LIMIT} tasks, got {0}")]
    TooLarge(usize),
    #[error("schedule does not cover task {0}")]
    Incomplete(String),
    #[error("bad site class {0:?}")]
    BadSiteClass(String),
}

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct ResourceVector {
    pub cpu: u32,
    pub gpu: u32,
    pub npu: u32,
}

impl ResourceVector {
    pub const fn new(cpu: u32, gpu: u32, npu: u32) -> Self {
        ResourceVector { cpu, gpu, npu }
    }

    pub fn fits_within(&self, cap: &ResourceVector) -> bool {
        self.cpu <= cap.cpu && self.gpu <= cap.gpu && self.npu <= cap.npu
    }

    pub fn plus(&self, o: &ResourceVector) -> ResourceVector {
        ResourceVector::new(self.cpu + o.cpu, self.gpu + o.gpu, self.npu + o.npu)
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cpu={},gpu={},npu={}", self.cpu, self.gpu, self.npu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteClass {
    Vehicle,
    Edge,
    Cloud,
}

impl SiteClass {
    pub fn name(self) -> &'static str {
        match self {
            SiteClass::Vehicle => "VEHICLE",
            SiteClass::Edge => "EDGE",
            SiteClass::Cloud => "CLOUD",
        }
    }
}

impl FromStr for SiteClass {
    type Err = SchedError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "VEHICLE" => Ok(SiteClass::Vehicle),
            "EDGE" => Ok(SiteClass::Edge),
            "CLOUD" => Ok(SiteClass::Cloud),
            _ => Err(SchedError::BadSiteClass(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: String,
    pub demand: ResourceVector,
    /// Classes without an entry cannot run the task.
    pub duration_ms: BTreeMap<SiteClass, u64>,
    pub deps: Vec<String>,
    pub output_bytes: u64,
    /// Bytes shipped from the DAG's origin site before the task can start.
    pub input_bytes: u64,
    /// Relative to the DAG release time.
    pub deadline_ms: Option<u64>,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, demand: ResourceVector) -> Self {
        TaskSpec {
            id: id.into(),
            demand,
            duration_ms: BTreeMap::new(),
            deps: Vec::new(),
            output_bytes: 0,
            input_bytes: 0,
            deadline_ms: None,
        }
    }

    pub fn on(mut self, class: SiteClass, ms: u64) -> Self {
        self.duration_ms.insert(class, ms);
        self
    }

    pub fn after(mut self, dep: &str) -> Self {
        self.deps.push(dep.to_string());
        self
    }

    pub fn output(mut self, bytes: u64) -> Self {
        self.output_bytes = bytes;
        self
    }

    pub fn input(mut self, bytes: u64) -> Self {
        self.input_bytes = bytes;
        self
    }

    pub fn deadline(mut self, ms: u64) -> Self {
        self.deadline_ms = Some(ms);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComputeSite {
    pub id: String,
    pub class: SiteClass,
    pub capacity: ResourceVector,
    pub node: NodeId,
}

impl ComputeSite {
    pub fn new(
        id: impl Into<String>,
        class: SiteClass,
        capacity: ResourceVector,
        node: NodeId,
    ) -> Self {
        ComputeSite {
            id: id.into(),
            class,
            capacity,
            node,
        }
    }

    fn can_host(&self, t: &TaskSpec) -> bool {
        t.duration_ms.contains_key(&self.class) && t.demand.fits_within(&self.capacity)
    }
}

/// Validated DAG in a fixed topological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    tasks: Vec<TaskSpec>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    topo: Vec<usize>,
    /// Site holding the DAG's input data; defaults to the first site.
    pub origin: Option<String>,
}

impl Dag {
    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn topo_order(&self) -> Vec<&str> {
        self.topo
            .iter()
            .map(|&i| self.tasks[i].id.as_str())
            .collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.id == id)
    }

    pub fn with_origin(mut self, site: &str) -> Self {
        self.origin = Some(site.to_string());
        self
    }
}

pub fn submit_dag(tasks: Vec<TaskSpec>, sites: &[ComputeSite]) -> Result<Dag, SchedError> {
    let mut index = BTreeMap::new();
    for (i, t) in tasks.iter().enumerate() {
        if index.insert(t.id.clone(), i).is_some() {
            return Err(SchedError::DuplicateTask(t.id.clone()));
        }
    }
    let n = tasks.len();
    let mut parents = vec![Vec::new(); n];
    let mut children = vec![Vec::new(); n];
    for (i, t) in tasks.iter().enumerate() {
        for d in &t.deps {
            let &p = index.get(d).ok_or_else(|| SchedError::UnknownDependency {
                task: t.id.clone(),
                dep: d.clone(),
            })?;
            if p == i {
                return Err(SchedError::CycleDetected(t.id.clone()));
            }
            if !parents[i].contains(&p) {
                parents[i].push(p);
                children[p].push(i);
            }
        }
    }
    // Kahn, smallest id first among ready tasks
    let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut ready: BTreeSet<(&str, usize)> = (0..n)
        .filter(|&i| indeg[i] == 0)
        .map(|i| (tasks[i].id.as_str(), i))
        .collect();
    let mut topo = Vec::with_capacity(n);
    while let Some(first) = ready.pop_first() {
        let i = first.1;
        topo.push(i);
        for &c in &children[i] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                ready.insert((tasks[c].id.as_str(), c));
            }
        }
    }
    if topo.len() < n {
        let stuck = (0..n)
            .find(|&i| indeg[i] > 0)
            .expect("some task is on a cycle");
        return Err(SchedError::CycleDetected(tasks[stuck].id.clone()));
    }
    for t in &tasks {
        if !sites.iter().any(|s| s.can_host(t)) {
            return Err(SchedError::UnsatisfiableDemand(t.id.clone()));
        }
    }
    Ok(Dag {
        tasks,
        parents,
        children,
        topo,
        origin: None,
    })
}

/// `ceil(bytes / bandwidth) + latency` between distinct sites; zero on the same site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferModel {
    default_bandwidth: u64,
    links: BTreeMap<(String, String), (u64, u64)>,
}

impl TransferModel {
    /// Every pair of distinct sites gets `latency_ms` and `bytes_per_ms`.
    pub fn uniform(sites: &[ComputeSite], latency_ms: u64, bytes_per_ms: u64) -> Self {
        let mut m = TransferModel {
            default_bandwidth: bytes_per_ms.max(1),
            links: BTreeMap::new(),
        };
        for a in sites {
            for b in sites {
                if a.id != b.id {
                    m.links.insert(
                        (a.id.clone(), b.id.clone()),
                        (latency_ms, bytes_per_ms.max(1)),
                    );
                }
            }
        }
        m
    }

    /// Latencies from the simulator's current routes; unreachable pairs are omitted.
    pub fn from_sim(sites: &[ComputeSite], sim: &Sim, bytes_per_ms: u64) -> Self {
        let mut m = TransferModel {
            default_bandwidth: bytes_per_ms.max(1),
            links: BTreeMap::new(),
        };
        for a in sites {
            for b in sites {
                if a.id == b.id {
                    continue;
                }
                let lat = if a.node == b.node {
                    Some(0)
                } else {
                    sim.path_latency(a.node, b.node)
                };
                if let Some(lat) = lat {
                    m.links
                        .insert((a.id.clone(), b.id.clone()), (lat, bytes_per_ms.max(1)));
                }
            }
        }
        m
    }

    pub fn set(&mut self, from: &str, to: &str, latency_ms: u64, bytes_per_ms: u64) {
        self.links.insert(
            (from.to_string(), to.to_string()),
            (latency_ms, bytes_per_ms.max(1)),
        );
    }

    pub fn set_bandwidth(&mut self, from: &str, to: &str, bytes_per_ms: u64) {
        if let Some(l) = self.links.get_mut(&(from.to_string(), to.to_string())) {
            l.1 = bytes_per_ms.max(1);
        }
    }

    pub fn serialization_ms(&self, bytes: u64, from: &str, to: &str) -> u64 {
        let bw = self
            .links
            .get(&(from.to_string(), to.to_string()))
            .map_or(self.default_bandwidth, |l| l.1);
        bytes.div_ceil(bw)
    }

    /// `None` when the pair is unreachable.
    pub fn transfer_ms(&self, bytes: u64, from: &str, to: &str) -> Option<u64> {
        if from == to {
            return Some(0);
        }
        let &(lat, bw) = self.links.get(&(from.to_string(), to.to_string()))?;
        Some(bytes.div_ceil(bw) + lat)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub site: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Schedule {
    pub placements: BTreeMap<String, Placement>,
}

impl Schedule {
    pub fn makespan_ms(&self) -> u64 {
        self.placements
            .values()
            .map(|p| p.end_ms)
            .max()
            .unwrap_or(0)
    }

    pub fn deadline_miss_ratio(&self, dag: &Dag) -> f64 {
        let ends: BTreeMap<&str, Option<u64>> = self
            .placements
            .iter()
            .map(|(k, p)| (k.as_str(), Some(p.end_ms)))
            .collect();
        miss_ratio(dag, &ends)
    }
}

/// Tasks that never finish, or finish after their deadline, over all tasks.
fn miss_ratio(dag: &Dag, ends: &BTreeMap<&str, Option<u64>>) -> f64 {
    if dag.tasks.is_empty() {
        return 0.0;
    }
    let missed = dag
        .tasks
        .iter()
        .filter(|t| match ends.get(t.id.as_str()).copied().flatten() {
            None => true,
            Some(end) => t.deadline_ms.is_some_and(|d| end > d),
        })
        .count();
    missed as f64 / dag.tasks.len() as f64
}

fn origin_site<'a>(dag: &'a Dag, sites: &'a [ComputeSite]) -> Option<&'a str> {
    dag.origin
        .as_deref()
        .or_else(|| sites.first().map(|s| s.id.as_str()))
}

/// Earliest time a task can start on `site` given placed parents.
fn ready_time(
    dag: &Dag,
    task: usize,
    site: &ComputeSite,
    placed: &Placed,
    sites: &[ComputeSite],
    model: &TransferModel,
) -> Option<u64> {
    let t = &dag.tasks[task];
    let mut ready = 0;
    if t.input_bytes > 0 {
        let origin = origin_site(dag, sites)?;
        ready = model.transfer_ms(t.input_bytes, origin, &site.id)?;
    }
    for &p in &dag.parents[task] {
        let &(ps, _, pend) = placed.get(&p)?;
        let x = model.transfer_ms(dag.tasks[p].output_bytes, &sites[ps].id, &site.id)?;
        ready = ready.max(pend + x);
    }
    Some(ready)
}

/// Insertion-based earliest start at or after `ready` keeping usage within capacity.
fn earliest_fit(
    busy: &[(u64, u64, ResourceVector)],
    cap: &ResourceVector,
    demand: &ResourceVector,
    ready: u64,
    dur: u64,
) -> u64 {
    let mut candidates: Vec<u64> = std::iter::once(ready)
        .chain(busy.iter().map(|b| b.1).filter(|&e| e > ready))
        .collect();
    candidates.sort_unstable();
    candidates.dedup();
    for s in candidates {
        let e = s + dur;
        // usage is piecewise constant; check at s and at every interval start inside (s, e)
        let points = std::iter::once(s).chain(busy.iter().map(|b| b.0).filter(|&x| x > s && x < e));
        let fits = points.into_iter().all(|x| {
            let used = busy
                .iter()
                .filter(|b| b.0 <= x && x < b.1)
                .fold(*demand, |acc, b| acc.plus(&b.2));
            used.fits_within(cap)
        });
        if fits || dur == 0 {
            return s;
        }
    }
    unreachable!("the last interval end always fits")
}

fn upward_ranks(dag: &Dag, sites: &[ComputeSite], model: &TransferModel) -> Vec<f64> {
    let n = dag.len();
    let mut rank = vec![0.0; n];
    for &i in dag.topo.iter().rev() {
        let t = &dag.tasks[i];
        let feasible: Vec<u64> = sites
            .iter()
            .filter(|s| s.can_host(t))
            .map(|s| t.duration_ms[&s.class])
            .collect();
        let avg = feasible.iter().sum::<u64>() as f64 / feasible.len().max(1) as f64;
        let mut comm_sum = 0.0;
        let mut pairs = 0.0;
        for a in sites {
            for b in sites {
                if let Some(x) = model.transfer_ms(t.output_bytes, &a.id, &b.id) {
                    comm_sum += x as f64;
                    pairs += 1.0;
                }
            }
        }
        let comm = if pairs > 0.0 { comm_sum / pairs } else { 0.0 };
        let tail = dag.children[i].iter().map(|&c| rank[c]).fold(0.0, f64::max);
        rank[i] = avg
            + if dag.children[i].is_empty() {
                0.0
            } else {
                comm + tail
            };
    }
    rank
}

/// List scheduling by upward rank with earliest-finish-time placement.
pub fn schedule_eft(dag: &Dag, sites: &[ComputeSite], model: &TransferModel) -> Schedule {
    let rank = upward_ranks(dag, sites, model);
    let mut site_order: Vec<usize> = (0..sites.len()).collect();
    site_order.sort_by(|&a, &b| sites[a].id.cmp(&sites[b].id));
    let mut busy: Vec<Vec<(u64, u64, ResourceVector)>> = vec![Vec::new(); sites.len()];
    let mut placed: Placed = BTreeMap::new();
    let mut remaining: BTreeSet<usize> = (0..dag.len()).collect();
    while !remaining.is_empty() {
        let next = remaining
            .iter()
            .copied()
            .filter(|&i| dag.parents[i].iter().all(|p| placed.contains_key(p)))
            .max_by(|&a, &b| {
                rank[a]
                    .total_cmp(&rank[b])
                    .then_with(|| dag.tasks[b].id.cmp(&dag.tasks[a].id))
            })
            .expect("a DAG always has a ready task");
        remaining.remove(&next);
        let t = &dag.tasks[next];
        let mut best: Option<(u64, usize, u64)> = None;
        for &si in &site_order {
            let s = &sites[si];
            if !s.can_host(t) {
                continue;
            }
            let Some(ready) = ready_time(dag, next, s, &placed, sites, model) else {
                continue;
            };
            let dur = t.duration_ms[&s.class];
            let start = earliest_fit(&busy[si], &s.capacity, &t.demand, ready, dur);
            if best.is_none_or(|(e, _, _)| start + dur < e) {
                best = Some((start + dur, si, start));
            }
        }
        let Some((end, si, start)) = best else {
            // no reachable host: leave unplaced
            continue;
        };
        busy[si].push((start, end, t.demand));
        placed.insert(next, (si, start, end));
    }
    Schedule {
        placements: placed
            .into_iter()
            .map(|(i, (si, s, e))| {
                (
                    dag.tasks[i].id.clone(),
                    Placement {
                        site: sites[si].id.clone(),
                        start_ms: s,
                        end_ms: e,
                    },
                )
            })
            .collect(),
    }
}

/// Checks precedence with transfer time, origin input, class support and capacity.
pub fn validate_schedule(
    dag: &Dag,
    sites: &[ComputeSite],
    model: &TransferModel,
    sched: &Schedule,
) -> Result<(), String> {
    let site = |id: &str| sites.iter().find(|s| s.id == id);
    for t in &dag.tasks {
        let p = sched
            .placements
            .get(&t.id)
            .ok_or(format!("{} unplaced", t.id))?;
        let s = site(&p.site).ok_or(format!("{} on unknown site", t.id))?;
        let dur = *t
            .duration_ms
            .get(&s.class)
            .ok_or(format!("{} cannot run on {}", t.id, s.id))?;
        if p.end_ms != p.start_ms + dur {
            return Err(format!("{} has wrong duration", t.id));
        }
        if t.input_bytes > 0 {
            let origin = dag.origin.as_deref().unwrap_or(&sites[0].id);
            let x = model
                .transfer_ms(t.input_bytes, origin, &s.id)
                .ok_or("input unreachable")?;
            if p.start_ms < x {
                return Err(format!("{} starts before its input arrives", t.id));
            }
        }
        for d in &t.deps {
            let q = &sched.placements[d];
            let parent = &dag.tasks[dag.index_of(d).expect("validated")];
            let x = model
                .transfer_ms(parent.output_bytes, &q.site, &p.site)
                .ok_or("transfer unreachable")?;
            if p.start_ms < q.end_ms + x {
                return Err(format!("{} starts before output of {} arrives", t.id, d));
            }
        }
    }
    for s in sites {
        let here: Vec<(&TaskSpec, &Placement)> = dag
            .tasks
            .iter()
            .map(|t| (t, &sched.placements[&t.id]))
            .filter(|(_, p)| p.site == s.id)
            .collect();
        for (_, p) in &here {
            let used = here
                .iter()
                .filter(|(_, q)| q.start_ms <= p.start_ms && p.start_ms < q.end_ms)
                .fold(ResourceVector::default(), |acc, (t, _)| acc.plus(&t.demand));
            if !used.fits_within(&s.capacity) {
                return Err(format!("capacity exceeded on {} at {}", s.id, p.start_ms));
            }
        }
    }
    Ok(())
}

/// Task index to (site index, start, end).
type Placed = BTreeMap<usize, (usize, u64, u64)>;

struct Search<'a> {
    dag: &'a Dag,
    sites: &'a [ComputeSite],
    model: &'a TransferModel,
    best: Option<(u64, Placed)>,
}

impl Search<'_> {
    fn slot(&self, placed: &Placed, task: usize, si: usize, ready: u64) -> u64 {
        let t = &self.dag.tasks[task];
        let s = &self.sites[si];
        let dur = t.duration_ms[&s.class];
        let mine: Vec<(u64, u64, ResourceVector)> = placed
            .iter()
            .filter(|(_, v)| v.0 == si)
            .map(|(k, v)| (v.1, v.2, self.dag.tasks[*k].demand))
            .collect();
        let mut t0 = ready;
        loop {
            let t1 = t0 + dur;
            // scan every instant where usage can change
            let mut instants: Vec<u64> = vec![t0];
            instants.extend(mine.iter().map(|m| m.0).filter(|&x| x > t0 && x < t1));
            let clash = instants.iter().any(|&x| {
                let load = mine
                    .iter()
                    .filter(|m| m.0 <= x && x < m.1)
                    .fold(t.demand, |a, m| a.plus(&m.2));
                !load.fits_within(&s.capacity)
            });
            if !clash || dur == 0 {
                return t0;
            }
            t0 = mine
                .iter()
                .map(|m| m.1)
                .filter(|&e| e > t0)
                .min()
                .expect("some interval ends later");
        }
    }

    fn dfs(&mut self, placed: &mut Placed, span: u64) {
        if self.best.as_ref().is_some_and(|(b, _)| span >= *b) {
            return;
        }
        if placed.len() == self.dag.len() {
            self.best = Some((span, placed.clone()));
            return;
        }
        let ready: Vec<usize> = (0..self.dag.len())
            .filter(|i| {
                !placed.contains_key(i)
                    && self.dag.parents[*i].iter().all(|p| placed.contains_key(p))
            })
            .collect();
        for task in ready {
            for si in 0..self.sites.len() {
                if !self.sites[si].can_host(&self.dag.tasks[task]) {
                    continue;
                }
                let Some(r) = ready_time(
                    self.dag,
                    task,
                    &self.sites[si],
                    placed,
                    self.sites,
                    self.model,
                ) else {
                    continue;
                };
                let start = self.slot(placed, task, si, r);
                let end = start + self.dag.tasks[task].duration_ms[&self.sites[si].class];
                placed.insert(task, (si, start, end));
                self.dfs(placed, span.max(end));
                placed.remove(&task);
            }
        }
    }
}

/// Minimum makespan over every site assignment and every topological
/// placement order, each task placed at its earliest feasible start.
pub fn brute_force_schedule(
    dag: &Dag,
    sites: &[ComputeSite],
    model: &TransferModel,
) -> Result<Schedule, SchedError> {
    if dag.len() > BRUTE_FORCE_LIMIT {
        return Err(SchedError::TooLarge(dag.len()));
    }
    let mut search = Search {
        dag,
        sites,
        model,
        best: None,
    };
    search.dfs(&mut BTreeMap::new(), 0);
    let placed = search.best.map(|b| b.1).unwrap_or_default();
    Ok(Schedule {
        placements: placed
            .into_iter()
            .map(|(i, (si, s, e))| {
                (
                    dag.tasks[i].id.clone(),
                    Placement {
                        site: sites[si].id.clone(),
                        start_ms: s,
                        end_ms: e,
                    },
                )
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    /// Realized `(site, start, end)` relative to release.
    pub realized: BTreeMap<String, Placement>,
    pub missed: Vec<String>,
    pub makespan_ms: u64,
    pub deadline_miss_ratio: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransferMsg {
    exec: u64,
    task: usize,
    from_task: Option<usize>,
    bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskRun {
    Waiting,
    Running,
    Done(u64, u64),
    Missed,
}

/// A schedule being executed over the simulator.
#[derive(Debug)]
pub struct Execution {
    id: u64,
    dag: Dag,
    sites: Vec<ComputeSite>,
    model: TransferModel,
    schedule: Schedule,
    release: u64,
    site_of: Vec<usize>,
    inputs_left: Vec<usize>,
    inputs_at: Vec<u64>,
    state: Vec<TaskRun>,
    transfers: BTreeMap<crate::netsim::MsgId, usize>,
    // pending sends: token -> (task, from_task)
    pending_sends: BTreeMap<u64, (usize, Option<usize>)>,
    next_token: u64,
}

impl Execution {
    /// Releases the DAG at the current simulated time.
    pub fn start(
        fabric: &mut Fabric,
        id: u64,
        dag: &Dag,
        sites: &[ComputeSite],
        model: &TransferModel,
        schedule: &Schedule,
    ) -> Result<Execution, SchedError> {
        let mut site_of = Vec::with_capacity(dag.len());
        for t in &dag.tasks {
            let p = schedule
                .placements
                .get(&t.id)
                .ok_or_else(|| SchedError::Incomplete(t.id.clone()))?;
            site_of.push(
                sites
                    .iter()
                    .position(|s| s.id == p.site)
                    .ok_or_else(|| SchedError::UnknownSite(p.site.clone()))?,
            );
        }
        let release = fabric.now();
        let mut exec = Execution {
            id: id & 0xFFFF,
            dag: dag.clone(),
            sites: sites.to_vec(),
            model: model.clone(),
            schedule: schedule.clone(),
            release,
            inputs_left: dag.parents.iter().map(Vec::len).collect(),
            inputs_at: vec![release; dag.len()],
            state: vec![TaskRun::Waiting; dag.len()],
            site_of,
            transfers: BTreeMap::new(),
            pending_sends: BTreeMap::new(),
            next_token: 0,
        };
        let origin = origin_site(dag, sites).and_then(|o| sites.iter().position(|s| s.id == o));
        for i in 0..dag.len() {
            let need_input =
                dag.tasks[i].input_bytes > 0 && origin.is_some_and(|o| o != exec.site_of[i]);
            if need_input {
                exec.inputs_left[i] += 1;
                let from = origin.expect("checked");
                exec.queue_send(fabric, i, None, from);
            }
        }
        for i in 0..dag.len() {
            exec.try_start(fabric, i);
        }
        Ok(exec)
    }

    fn token(&self, kind: u64, local: u64) -> u64 {
        (TOKEN_LAYER_SCHED << TIMER_LAYER_SHIFT) | (self.id << 40) | (kind << 39) | local
    }

    fn queue_send(
        &mut self,
        fabric: &mut Fabric,
        task: usize,
        from_task: Option<usize>,
        from_site: usize,
    ) {
        let to_site = &self.sites[self.site_of[task]];
        let bytes = match from_task {
            Some(p) => self.dag.tasks[p].output_bytes,
            None => self.dag.tasks[task].input_bytes,
        };
        let ser = self
            .model
            .serialization_ms(bytes, &self.sites[from_site].id, &to_site.id);
        let local = self.next_token;
        self.next_token += 1;
        self.pending_sends.insert(local, (task, from_task));
        let at = fabric.now() + ser;
        let tok = self.token(1, local);
        fabric
            .sim_mut()
            .schedule_timer(self.sites[from_site].node, at, tok);
    }

    fn try_start(&mut self, fabric: &mut Fabric, i: usize) {
        if self.state[i] != TaskRun::Waiting || self.inputs_left[i] > 0 {
            return;
        }
        let planned = self.release + self.schedule.placements[&self.dag.tasks[i].id].start_ms;
        let start = planned.max(self.inputs_at[i]).max(fabric.now());
        let dur = self.dag.tasks[i].duration_ms[&self.sites[self.site_of[i]].class];
        self.state[i] = TaskRun::Running;
        let tok = self.token(0, i as u64);
        fabric
            .sim_mut()
            .schedule_timer(self.sites[self.site_of[i]].node, start + dur, tok);
        // remember the start through the done timer
        self.inputs_at[i] = start;
    }

    fn mark_missed(&mut self, i: usize) {
        if matches!(self.state[i], TaskRun::Done(..) | TaskRun::Missed) {
            return;
        }
        self.state[i] = TaskRun::Missed;
        for c in self.dag.children[i].clone() {
            self.mark_missed(c);
        }
    }

    pub fn is_done(&self) -> bool {
        self.state
            .iter()
            .all(|s| matches!(s, TaskRun::Done(..) | TaskRun::Missed))
    }

    /// Consumes events belonging to this execution.
    pub fn on_event(&mut self, fabric: &mut Fabric, ev: &FabricEvent) -> bool {
        let FabricEvent::Net(net) = ev else {
            return false;
        };
        match net {
            NetEvent::Timer { token, .. }
                if token >> TIMER_LAYER_SHIFT == TOKEN_LAYER_SCHED
                    && (token >> 40) & 0xFFFF == self.id =>
            {
                let local = token & ((1 << 39) - 1);
                if (token >> 39) & 1 == 0 {
                    let i = local as usize;
                    let now = fabric.now();
                    if self.state[i] != TaskRun::Running {
                        return true;
                    }
                    self.state[i] = TaskRun::Done(self.inputs_at[i], now);
                    for c in self.dag.children[i].clone() {
                        if self.site_of[c] == self.site_of[i] {
                            self.arrived(fabric, c, now);
                        } else {
                            self.queue_send(fabric, c, Some(i), self.site_of[i]);
                        }
                    }
                } else if let Some((task, from_task)) = self.pending_sends.remove(&local) {
                    let from_site = match from_task {
                        Some(p) => self.site_of[p],
                        None => {
                            let o =
                                origin_site(&self.dag, &self.sites).expect("input implies origin");
                            self.sites.iter().position(|s| s.id == o).expect("known")
                        }
                    };
                    let src = self.sites[from_site].node;
                    let dst = self.sites[self.site_of[task]].node;
                    if src == dst {
                        let now = fabric.now();
                        self.arrived(fabric, task, now);
                        return true;
                    }
                    let msg = TransferMsg {
                        exec: self.id,
                        task,
                        from_task,
                        bytes: 0,
                    };
                    let payload = serde_json::to_vec(&msg).expect("serializes");
                    match fabric.sim_mut().send_reliable(src, dst, CH_SCHED, payload) {
                        Ok(id) => {
                            self.transfers.insert(id, task);
                        }
                        Err(_) => self.mark_missed(task),
                    }
                }
                true
            }
            NetEvent::Delivered {
                channel: CH_SCHED,
                msg,
                ..
            } => match self.transfers.remove(msg) {
                Some(task) => {
                    let now = fabric.now();
                    self.arrived(fabric, task, now);
                    true
                }
                None => false,
            },
            NetEvent::Unreachable {
                channel: CH_SCHED,
                msg,
                ..
            } => match self.transfers.remove(msg) {
                Some(task) => {
                    self.mark_missed(task);
                    true
                }
                None => false,
            },
            _ => false,
        }
    }

    fn arrived(&mut self, fabric: &mut Fabric, task: usize, at: u64) {
        if self.state[task] != TaskRun::Waiting {
            return;
        }
        self.inputs_left[task] -= 1;
        self.inputs_at[task] = self.inputs_at[task].max(at);
        self.try_start(fabric, task);
    }

    pub fn trace(&self) -> ExecutionTrace {
        let mut realized = BTreeMap::new();
        let mut missed = Vec::new();
        let mut ends: BTreeMap<&str, Option<u64>> = BTreeMap::new();
        for (i, t) in self.dag.tasks.iter().enumerate() {
            match self.state[i] {
                TaskRun::Done(s, e) => {
                    let (s, e) = (s - self.release, e - self.release);
                    realized.insert(
                        t.id.clone(),
                        Placement {
                            site: self.sites[self.site_of[i]].id.clone(),
                            start_ms: s,
                            end_ms: e,
                        },
                    );
                    ends.insert(t.id.as_str(), Some(e));
                }
                _ => {
                    missed.push(t.id.clone());
                    ends.insert(t.id.as_str(), None);
                }
            }
        }
        ExecutionTrace {
            makespan_ms: realized.values().map(|p| p.end_ms).max().unwrap_or(0),
            deadline_miss_ratio: miss_ratio(&self.dag, &ends),
            realized,
            missed,
        }
    }
}

/// Executes `schedule` to completion. Unrelated events are handed back to the fabric.
pub fn run_schedule(
    fabric: &mut Fabric,
    dag: &Dag,
    sites: &[ComputeSite],
    model: &TransferModel,
    schedule: &Schedule,
) -> Result<ExecutionTrace, SchedError> {
    let mut exec = Execution::start(fabric, 0, dag, sites, model, schedule)?;
    let mut foreign = Vec::new();
    while !exec.is_done() {
        let Some(evs) = fabric.step_one() else { break };
        for ev in evs {
            if !exec.on_event(fabric, &ev) {
                foreign.push(ev);
            }
        }
    }
    fabric.requeue(foreign);
    Ok(exec.trace())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopConfig {
    pub epochs: u64,
    pub epoch_ms: u64,
    /// `(agent index, first epoch, last epoch)` during which the agent is cut off.
    pub disconnect: Option<(usize, u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopTrace {
    /// Policy versions each agent adopted, in order.
    pub versions: BTreeMap<NodeId, Vec<u64>>,
    pub observations: u64,
    pub final_version: u64,
}

#[derive(Debug, Serialize, Deserialize)]
enum LoopMsg {
    Observation { epoch: u64, version: u64 },
    Policy { version: u64 },
    Request,
}

/// Agents report observations each epoch; the trainer publishes version
/// `epoch` at the epoch deadline and broadcasts it. Agents only move forward
/// and ask for the latest version when they regain connectivity.
pub fn run_interactive_loop(
    fabric: &mut Fabric,
    trainer: NodeId,
    agents: &[NodeId],
    cfg: &LoopConfig,
) -> LoopTrace {
    let base = fabric.now();
    let tok = |kind: u64, x: u64| (TOKEN_LAYER_LOOP << TIMER_LAYER_SHIFT) | (kind << 32) | x;
    for e in 1..=cfg.epochs {
        fabric
            .sim_mut()
            .schedule_timer(trainer, base + (e - 1) * cfg.epoch_ms, tok(0, e));
        fabric
            .sim_mut()
            .schedule_timer(trainer, base + e * cfg.epoch_ms - 1, tok(1, e));
    }
    let cut_links: Vec<_> = match cfg.disconnect {
        Some((a, from, to)) if a < agents.len() => {
            let sim = fabric.sim();
            let links: Vec<_> = sim
                .link_ids()
                .filter(|l| {
                    let (x, y, _, _) = sim.link(*l).expect("listed");
                    x == agents[a] || y == agents[a]
                })
                .collect();
            fabric
                .sim_mut()
                .schedule_timer(trainer, base + (from - 1) * cfg.epoch_ms, tok(2, 0));
            fabric
                .sim_mut()
                .schedule_timer(trainer, base + to * cfg.epoch_ms, tok(3, 0));
            links
        }
        _ => Vec::new(),
    };
    let mut current: BTreeMap<NodeId, u64> = agents.iter().map(|a| (*a, 0)).collect();
    let mut versions: BTreeMap<NodeId, Vec<u64>> =
        agents.iter().map(|a| (*a, Vec::new())).collect();
    let mut latest = 0;
    let mut observations = 0;
    let mut foreign = Vec::new();
    let send = |fabric: &mut Fabric, src: NodeId, dst: NodeId, m: &LoopMsg| {
        let bytes = serde_json::to_vec(m).expect("serializes");
        fabric
            .sim_mut()
            .send_reliable(src, dst, CH_LOOP, bytes)
            .expect("valid endpoints");
    };
    let mut timers_left = 2 * cfg.epochs + if cut_links.is_empty() { 0 } else { 2 };
    let done = |timers_left: u64, current: &BTreeMap<NodeId, u64>, latest: u64| {
        timers_left == 0 && current.values().all(|v| *v == latest)
    };
    while !done(timers_left, &current, latest) {
        let Some(evs) = fabric.step_one() else { break };
        for ev in evs {
            let FabricEvent::Net(net) = &ev else {
                foreign.push(ev);
                continue;
            };
            match net {
                NetEvent::Timer { token, .. } if token >> TIMER_LAYER_SHIFT == TOKEN_LAYER_LOOP => {
                    timers_left -= 1;
                    let kind = (token >> 32) & 0xFF;
                    let e = token & 0xFFFF_FFFF;
                    match kind {
                        0 => {
                            for a in agents {
                                let reachable = fabric.sim().has_route(*a, trainer);
                                if reachable {
                                    send(
                                        fabric,
                                        *a,
                                        trainer,
                                        &LoopMsg::Observation {
                                            epoch: e,
                                            version: current[a],
                                        },
                                    );
                                }
                            }
                        }
                        1 => {
                            latest = e;
                            let line = format!("LOOP {} trainer version {}", fabric.now(), latest);
                            fabric.sim_mut().trace_mut().record(line);
                            for a in agents {
                                send(fabric, trainer, *a, &LoopMsg::Policy { version: latest });
                            }
                        }
                        2 => {
                            for l in &cut_links {
                                fabric
                                    .sim_mut()
                                    .set_link_status(*l, LinkStatus::Down)
                                    .expect("known link");
                            }
                        }
                        _ => {
                            for l in &cut_links {
                                fabric
                                    .sim_mut()
                                    .set_link_status(*l, LinkStatus::Up)
                                    .expect("known link");
                            }
                            if let Some((a, _, _)) = cfg.disconnect {
                                send(fabric, agents[a], trainer, &LoopMsg::Request);
                            }
                        }
                    }
                }
                NetEvent::Delivered {
                    channel: CH_LOOP,
                    src,
                    dst,
                    payload,
                    ..
                } => match serde_json::from_slice::<LoopMsg>(payload) {
                    Ok(LoopMsg::Observation { .. }) => observations += 1,
                    Ok(LoopMsg::Request) => {
                        send(fabric, *dst, *src, &LoopMsg::Policy { version: latest })
                    }
                    Ok(LoopMsg::Policy { version }) => {
                        if let Some(cur) = current.get_mut(dst) {
                            if version > *cur {
                                *cur = version;
                                versions.get_mut(dst).expect("same keys").push(version);
                                let line = format!(
                                    "LOOP {} {} adopt {}",
                                    fabric.now(),
                                    fabric.sim().name(*dst),
                                    version
                                );
                                fabric.sim_mut().trace_mut().record(line);
                            }
                        }
                    }
                    Err(_) => {}
                },
                NetEvent::Unreachable {
                    channel: CH_LOOP, ..
                } => {}
                _ => foreign.push(ev),
            }
        }
    }
    fabric.requeue(foreign);
    LoopTrace {
        versions,
        observations,
        final_version: latest,
    }
}

/// The perception fan-out: a CPU stage, three GPU detectors, a CPU decision.
pub fn perception_dag(
    sites: &[ComputeSite],
    output_bytes: u64,
    deadline_ms: Option<u64>,
) -> Result<Dag, SchedError> {
    let cpu = ResourceVector::new(1, 0, 0);
    let gpu = ResourceVector::new(0, 1, 0);
    let stage = |id: &str, d: ResourceVector, veh: u64, edge: u64| {
        TaskSpec::new(id, d)
            .on(SiteClass::Vehicle, veh)
            .on(SiteClass::Edge, edge)
            .on(SiteClass::Cloud, edge)
            .output(output_bytes)
    };
    let mut decide = stage("decide", cpu, 5, 5)
        .after("detect_objects")
        .after("detect_lights")
        .after("segment_road");
    decide.deadline_ms = deadline_ms;
    decide.output_bytes = 0;
    submit_dag(
        vec![
            stage("main", cpu, 5, 5),
            stage("detect_objects", gpu, 30, 30).after("main"),
            stage("detect_lights", gpu, 30, 30).after("main"),
            stage("segment_road", gpu, 30, 30).after("main"),
            decide,
        ],
        sites,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{LinkParams, NodeMode};

    fn two_sites() -> Vec<ComputeSite> {
        vec![
            ComputeSite::new(
                "edge",
                SiteClass::Edge,
                ResourceVector::new(2, 2, 0),
                NodeId(1),
            ),
            ComputeSite::new(
                "vehicle",
                SiteClass::Vehicle,
                ResourceVector::new(2, 1, 0),
                NodeId(0),
            ),
        ]
    }

    #[test]
    fn dag_errors() {
        let sites = two_sites();
        let t = TaskSpec::new("a", ResourceVector::new(1, 0, 0)).on(SiteClass::Vehicle, 1);
        assert!(matches!(
            submit_dag(vec![t.clone().after("a")], &sites),
            Err(SchedError::CycleDetected(_))
        ));
        let big = TaskSpec::new("g", ResourceVector::new(0, 3, 0))
            .on(SiteClass::Vehicle, 1)
            .on(SiteClass::Edge, 1);
        assert_eq!(
            submit_dag(vec![big], &sites),
            Err(SchedError::UnsatisfiableDemand("g".into()))
        );
        let b = TaskSpec::new("b", ResourceVector::new(1, 0, 0))
            .on(SiteClass::Vehicle, 1)
            .after("c");
        let c = TaskSpec::new("c", ResourceVector::new(1, 0, 0))
            .on(SiteClass::Vehicle, 1)
            .after("b");
        assert!(matches!(
            submit_dag(vec![b, c], &sites),
            Err(SchedError::CycleDetected(_))
        ));
        let dag = perception_dag(&sites, 100_000, None).unwrap();
        assert_eq!(dag.len(), 5);
        assert_eq!(dag.topo_order()[0], "main");
    }

    #[test]
    fn edge_offload_beats_vehicle_only() {
        let sites = two_sites();
        let vehicle_only = vec![sites[1].clone()];
        let dag = perception_dag(&sites, 100_000, Some(80))
            .unwrap()
            .with_origin("vehicle");
        let model = TransferModel::uniform(&sites, 10, 1_000_000);
        let with_edge = schedule_eft(&dag, &sites, &model);
        validate_schedule(&dag, &sites, &model, &with_edge).unwrap();
        let solo_model = TransferModel::uniform(&vehicle_only, 10, 1_000_000);
        let solo = schedule_eft(&dag, &vehicle_only, &solo_model);
        validate_schedule(&dag, &vehicle_only, &solo_model, &solo).unwrap();
        assert_eq!(solo.makespan_ms(), 100);
        assert!(with_edge.makespan_ms() < solo.makespan_ms());
        assert!(with_edge.deadline_miss_ratio(&dag) <= solo.deadline_miss_ratio(&dag));
    }

    #[test]
    fn brute_force_small_cases() {
        let sites = two_sites();
        let model = TransferModel::uniform(&sites, 1_000, 1);
        let one = submit_dag(
            vec![TaskSpec::new("a", ResourceVector::new(1, 0, 0))
                .on(SiteClass::Vehicle, 7)
                .on(SiteClass::Edge, 3)],
            &sites,
        )
        .unwrap()
        .with_origin("edge");
        let s = brute_force_schedule(&one, &sites, &model).unwrap();
        assert_eq!(
            (s.makespan_ms(), s.placements["a"].site.as_str()),
            (3, "edge")
        );
        let chain = submit_dag(
            vec![
                TaskSpec::new("a", ResourceVector::new(1, 0, 0))
                    .on(SiteClass::Vehicle, 5)
                    .on(SiteClass::Edge, 4)
                    .output(10_000),
                TaskSpec::new("b", ResourceVector::new(1, 0, 0))
                    .on(SiteClass::Vehicle, 5)
                    .on(SiteClass::Edge, 6)
                    .after("a"),
            ],
            &sites,
        )
        .unwrap();
        let s = brute_force_schedule(&chain, &sites, &model).unwrap();
        assert_eq!(s.placements["a"].site, s.placements["b"].site);
        let seven: Vec<TaskSpec> = (0..7)
            .map(|i| {
                TaskSpec::new(format!("t{i}"), ResourceVector::new(1, 0, 0)).on(SiteClass::Edge, 1)
            })
            .collect();
        let dag = submit_dag(seven, &sites).unwrap();
        assert_eq!(
            brute_force_schedule(&dag, &sites, &model),
            Err(SchedError::TooLarge(7))
        );
    }

    fn net() -> (Fabric, Vec<ComputeSite>, crate::netsim::LinkId) {
        let mut sim = Sim::new(2);
        let v = sim.add_named_node("vehicle", NodeMode::Peer);
        let e = sim.add_named_node("edge", NodeMode::Router);
        let l = sim
            .add_link(v, e, LinkParams::new(10, 0.0, 1500).unwrap())
            .unwrap();
        sim.run_until_idle(1_000);
        let sites = vec![
            ComputeSite::new("edge", SiteClass::Edge, ResourceVector::new(2, 2, 0), e),
            ComputeSite::new(
                "vehicle",
                SiteClass::Vehicle,
                ResourceVector::new(2, 1, 0),
                v,
            ),
        ];
        (Fabric::new(sim), sites, l)
    }

    #[test]
    fn fault_free_run_matches_plan() {
        let (mut f, sites, _) = net();
        let dag = perception_dag(&sites, 100_000, Some(80))
            .unwrap()
            .with_origin("vehicle");
        let model = TransferModel::from_sim(&sites, f.sim(), 1_000_000);
        let plan = schedule_eft(&dag, &sites, &model);
        let run = run_schedule(&mut f, &dag, &sites, &model, &plan).unwrap();
        assert!(run.missed.is_empty());
        assert_eq!(run.realized, plan.placements);
    }

    #[test]
    fn partition_marks_tasks_missed() {
        let (mut f, sites, l) = net();
        let dag = perception_dag(&sites, 100_000, Some(80))
            .unwrap()
            .with_origin("vehicle");
        let model = TransferModel::from_sim(&sites, f.sim(), 1_000_000);
        let plan = schedule_eft(&dag, &sites, &model);
        assert!(plan.placements.values().any(|p| p.site == "edge"));
        f.sim_mut().set_link_status(l, LinkStatus::Down).unwrap();
        let run = run_schedule(&mut f, &dag, &sites, &model, &plan).unwrap();
        assert!(run.missed.contains(&"decide".to_string()));
        assert!(run.deadline_miss_ratio > 0.0);
    }

    #[test]
    fn policy_loop_monotone() {
        let mut sim = Sim::new(3);
        let trainer = sim.add_named_node("trainer", NodeMode::Router);
        let agents: Vec<NodeId> = (0..4)
            .map(|i| sim.add_named_node(format!("agent{i}"), NodeMode::Client))
            .collect();
        for a in &agents {
            sim.add_link(trainer, *a, LinkParams::new(5, 0.1, 1500).unwrap())
                .unwrap();
        }
        sim.run_until_idle(10_000);
        let mut f = Fabric::new(sim);
        let cfg = LoopConfig {
            epochs: 10,
            epoch_ms: 100,
            disconnect: Some((1, 3, 5)),
        };
        let tr = run_interactive_loop(&mut f, trainer, &agents, &cfg);
        assert_eq!(tr.final_version, 10);
        for seq in tr.versions.values() {
            assert!(seq.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(seq.last(), Some(&10));
        }
    }
}
