//! Seeded discrete-event engine: query workload, replica lifecycles, message
//! delivery with a fixed per-hop delay, update-channel capacity and
//! membership changes, all driving the per-node protocol.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use thiserror::Error;

use crate::metrics::{classify_justified, HopClass, JustificationWindow, MetricsLedger, PostedQuery};
use crate::overlay::{hash_key, HandoverPolicy, NodeId, Point, Topology};
use crate::policies::PolicyError;
use crate::protocol::{
    Action, IndexEntry, KeyId, Message, MessageBody, NodeState, ProtocolParams, QueryId, ReplicaId, Routing, Source,
    Time, Update, UpdateKind,
};
use crate::scheduler::{Capacity, PriorityOrder, UpdateChannels, TICK};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyDistribution {
    Uniform,
    Zipf(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    pub n_nodes: usize,
    pub keys_per_node: u32,
    /// Queries go to the first this-many keys only; `None` means all keys.
    pub queried_keys: Option<u32>,
    /// Queries per second across the whole network.
    pub query_rate: f64,
    pub key_distribution: KeyDistribution,
    pub replicas_per_key: u32,
    pub replica_lifetime: f64,
    pub sim_duration: f64,
    pub query_duration: f64,
    /// Querying starts here; every replica is born before it.
    pub warmup: f64,
    pub per_hop_latency: f64,
    pub rng_seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            n_nodes: 1024,
            keys_per_node: 1,
            queried_keys: None,
            query_rate: 1.0,
            key_distribution: KeyDistribution::Uniform,
            replicas_per_key: 1,
            replica_lifetime: 300.0,
            sim_duration: 22000.0,
            query_duration: 3000.0,
            warmup: 300.0,
            per_hop_latency: 0.05,
            rng_seed: 1,
        }
    }
}

impl WorkloadConfig {
    pub fn total_keys(&self) -> u32 {
        self.n_nodes as u32 * self.keys_per_node
    }

    pub fn query_start(&self) -> Time {
        self.warmup
    }

    pub fn query_end(&self) -> Time {
        self.warmup + self.query_duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CapacityPattern {
    #[default]
    Full,
    /// A fresh random share of nodes is throttled for 10 minutes, every
    /// 15 minutes, starting 5 minutes into querying.
    UpAndDown,
    /// A random share is throttled 5 minutes into querying and stays so.
    OnceDown,
    /// Every node is throttled from the start.
    AllNodes,
}

impl CapacityPattern {
    pub fn as_str(self) -> &'static str {
        match self {
            CapacityPattern::Full => "full",
            CapacityPattern::UpAndDown => "up-and-down",
            CapacityPattern::OnceDown => "once-down",
            CapacityPattern::AllNodes => "all-nodes",
        }
    }
}

impl std::str::FromStr for CapacityPattern {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "full" => CapacityPattern::Full,
            "up-and-down" | "updown" => CapacityPattern::UpAndDown,
            "once-down" | "oncedown" => CapacityPattern::OnceDown,
            "all-nodes" => CapacityPattern::AllNodes,
            _ => return Err(field("capacity_pattern", format!("unknown pattern {s:?}"))),
        })
    }
}

impl std::str::FromStr for KeyDistribution {
    type Err = ConfigError;
    /// `uniform` or `zipf:<s>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "uniform" {
            return Ok(KeyDistribution::Uniform);
        }
        s.strip_prefix("zipf:")
            .and_then(|x| x.parse().ok())
            .map(KeyDistribution::Zipf)
            .ok_or_else(|| field("key_distribution", format!("expected uniform or zipf:<s>, got {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityPlan {
    pub pattern: CapacityPattern,
    pub fraction: f64,
    pub affected_share: f64,
}

impl Default for CapacityPlan {
    fn default() -> Self {
        CapacityPlan { pattern: CapacityPattern::Full, fraction: 1.0, affected_share: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub workload: WorkloadConfig,
    pub params: ProtocolParams,
    pub priority: PriorityOrder,
    pub capacity: CapacityPlan,
    pub handover: HandoverPolicy,
    pub check_invariants: bool,
    pub trace: bool,
    pub classify_justification: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            workload: WorkloadConfig::default(),
            params: ProtocolParams::default(),
            priority: PriorityOrder::default(),
            capacity: CapacityPlan::default(),
            handover: HandoverPolicy::Copy,
            check_invariants: false,
            trace: false,
            classify_justification: true,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{field}: {msg}")]
    Field { field: &'static str, msg: String },
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
}

fn field(field: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field { field, msg: msg.into() }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let w = &self.workload;
        let n = w.n_nodes;
        if !(8..=4096).contains(&n) || !n.is_power_of_two() {
            return Err(field("n_nodes", format!("must be a power of two in [8, 4096], got {n}")));
        }
        if w.keys_per_node == 0 {
            return Err(field("keys_per_node", "must be at least 1"));
        }
        if let Some(q) = w.queried_keys {
            if q == 0 || q > w.total_keys() {
                return Err(field("queried_keys", format!("must be in [1, {}], got {q}", w.total_keys())));
            }
        }
        if !(w.query_rate >= 0.0 && w.query_rate.is_finite()) {
            return Err(field("query_rate", format!("must be finite and >= 0, got {}", w.query_rate)));
        }
        if let KeyDistribution::Zipf(s) = w.key_distribution {
            if !(s > 0.0 && s.is_finite()) {
                return Err(field("key_distribution", format!("zipf exponent must be > 0, got {s}")));
            }
        }
        if w.replicas_per_key == 0 {
            return Err(field("replicas_per_key", "must be at least 1"));
        }
        if !(w.replica_lifetime > 0.0 && w.replica_lifetime.is_finite()) {
            return Err(field("replica_lifetime", format!("must be > 0, got {}", w.replica_lifetime)));
        }
        if !(w.query_duration >= 0.0 && w.warmup >= 0.0) {
            return Err(field("query_duration", "durations must be >= 0"));
        }
        if w.query_duration > w.sim_duration {
            return Err(field(
                "query_duration",
                format!("must not exceed sim_duration ({} > {})", w.query_duration, w.sim_duration),
            ));
        }
        if !(w.per_hop_latency > 0.0 && w.per_hop_latency.is_finite()) {
            return Err(field("per_hop_latency", format!("must be > 0, got {}", w.per_hop_latency)));
        }
        let c = &self.capacity;
        if !(c.fraction >= 0.0 && c.fraction.is_finite()) {
            return Err(field("capacity_fraction", format!("must be finite and >= 0, got {}", c.fraction)));
        }
        if !(0.0..=1.0).contains(&c.affected_share) {
            return Err(field("affected_share", format!("must be in [0, 1], got {}", c.affected_share)));
        }
        if !self.priority.is_permutation() {
            return Err(field("priority", "must order each update kind exactly once"));
        }
        self.params.policy.validate()?;
        Ok(())
    }
}

/// Events injected on top of the generated workload.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scenario {
    pub queries: Vec<(Time, NodeId, KeyId)>,
    pub deaths: Vec<(Time, KeyId, ReplicaId)>,
    /// A new replica of the key is born.
    pub appends: Vec<(Time, KeyId)>,
    pub joins: Vec<(Time, NodeId)>,
    /// `(time, node, graceful)`.
    pub leaves: Vec<(Time, NodeId, bool)>,
    pub capacity_changes: Vec<(Time, NodeId, Capacity)>,
}

/// Topology plus the precomputed key placement.
#[derive(Debug, Clone)]
pub struct KeyedTopology {
    pub topo: Topology,
    pub points: Vec<Point>,
    pub authority: Vec<NodeId>,
}

impl KeyedTopology {
    pub fn new(topo: Topology, n_keys: u32) -> KeyedTopology {
        let points: Vec<Point> = (0..n_keys).map(|k| hash_key(&KeyId(k).name())).collect();
        let authority = points.iter().map(|&p| topo.owner_of(p)).collect();
        KeyedTopology { topo, points, authority }
    }

    fn recompute(&mut self) {
        self.authority = self.points.iter().map(|&p| self.topo.owner_of(p)).collect();
    }

    pub fn path(&self, from: NodeId, key: KeyId) -> Vec<NodeId> {
        self.topo.path_to(from, self.points[key.0 as usize])
    }
}

impl Routing for KeyedTopology {
    fn is_authority(&self, node: NodeId, key: KeyId) -> bool {
        self.authority[key.0 as usize] == node
    }
    fn next_hop(&self, node: NodeId, key: KeyId) -> NodeId {
        self.topo.route_next_hop(node, self.points[key.0 as usize])
    }
    fn distance(&self, node: NodeId, key: KeyId) -> u32 {
        self.topo.distance_to(node, self.points[key.0 as usize])
    }
    fn neighbors(&self, node: NodeId) -> &[NodeId] {
        self.topo.neighbors_of(node)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MissKind {
    FirstTime,
    Freshness,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub id: QueryId,
    pub at: Time,
    pub node: NodeId,
    pub key: KeyId,
    pub answered_at: Option<Time>,
    /// `None` for a hit.
    pub miss: Option<MissKind>,
    pub answer: Vec<ReplicaId>,
    /// Hops charged to this query: twice the distance its answer came from.
    pub cost: Option<u32>,
}

impl QueryRecord {
    /// Time to answer in units of the per-hop delay.
    pub fn latency_hops(&self, per_hop: f64) -> Option<f64> {
        self.answered_at.map(|t| (t - self.at) / per_hop)
    }
}

#[derive(Debug, Clone)]
enum EventKind {
    Query { node: NodeId, key: KeyId, generated: bool },
    Arrival { to: NodeId, msg: Message },
    ReplicaBirth { replica: ReplicaId },
    ReplicaRefresh { replica: ReplicaId },
    ReplicaDeath { replica: ReplicaId },
    Capacity { node: NodeId, capacity: Capacity },
    Tick,
    Join { splitting: NodeId },
    Leave { node: NodeId, graceful: bool },
    EndOfQuerying,
    End,
}

#[derive(Debug, Clone)]
struct Event {
    at: Time,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone)]
struct Replica {
    key: KeyId,
    alive: bool,
}

/// Named independent random streams derived from one seed.
struct Streams {
    arrivals: ChaCha8Rng,
    nodes: ChaCha8Rng,
    keys: ChaCha8Rng,
    births: ChaCha8Rng,
    capacity: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Streams {
        let s = |i: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i);
            r
        };
        Streams { arrivals: s(1), nodes: s(2), keys: s(3), births: s(4), capacity: s(5) }
    }
}

enum KeySampler {
    Uniform(u32),
    Zipf(Zipf<f64>),
}

impl KeySampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> KeyId {
        match self {
            KeySampler::Uniform(n) => KeyId(rng.random_range(0..*n)),
            KeySampler::Zipf(z) => KeyId(z.sample(rng) as u32 - 1),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub ledger: MetricsLedger,
    pub queries: Vec<QueryRecord>,
    pub trace: Option<String>,
    pub violations: Vec<String>,
    pub messages_sent: u64,
    pub events: u64,
    /// `(time, key, replica)` for every replica that came alive.
    pub births: Vec<(Time, KeyId, ReplicaId)>,
}

pub struct Simulation<'a> {
    cfg: &'a SimConfig,
    rt: KeyedTopology,
    history: Vec<Topology>,
    nodes: Vec<Option<NodeState>>,
    channels: Vec<UpdateChannels>,
    capacity: Vec<Capacity>,
    live: Vec<NodeId>,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: Time,
    tick_at: Option<Time>,
    rng: Streams,
    arrivals: Option<Exp<f64>>,
    keys: KeySampler,
    replicas: Vec<Replica>,
    ledger: MetricsLedger,
    queries: Vec<QueryRecord>,
    windows: Vec<JustificationWindow>,
    trace: Option<String>,
    monitor: Option<Monitor>,
    messages_sent: u64,
    events: u64,
    births: Vec<(Time, KeyId, ReplicaId)>,
}

#[derive(Default)]
struct Monitor {
    outstanding: HashMap<(NodeId, KeyId), u32>,
    violations: Vec<String>,
}

impl Monitor {
    fn flag(&mut self, msg: String) {
        if self.violations.len() < 100 {
            self.violations.push(msg);
        }
    }
}

pub fn run(cfg: &SimConfig, scenario: &Scenario) -> Result<RunOutput, ConfigError> {
    cfg.validate()?;
    let mut sim = Simulation::new(cfg)?;
    sim.schedule_scenario(scenario);
    sim.run_to_end();
    Ok(sim.finish())
}

impl<'a> Simulation<'a> {
    fn new(cfg: &'a SimConfig) -> Result<Simulation<'a>, ConfigError> {
        let w = &cfg.workload;
        let topo = Topology::grid(w.n_nodes).map_err(|e| field("n_nodes", e.to_string()))?;
        let n_keys = w.total_keys();
        let rt = KeyedTopology::new(topo.clone(), n_keys);
        let n = w.n_nodes;
        let queried = w.queried_keys.unwrap_or(n_keys);
        let keys = match w.key_distribution {
            KeyDistribution::Uniform => KeySampler::Uniform(queried),
            KeyDistribution::Zipf(s) => {
                KeySampler::Zipf(Zipf::new(queried as f64, s).map_err(|e| field("key_distribution", e.to_string()))?)
            }
        };
        let arrivals = (w.query_rate > 0.0).then(|| Exp::new(w.query_rate).expect("positive rate"));
        let mut sim = Simulation {
            cfg,
            history: vec![topo],
            live: rt.topo.nodes().collect(),
            rt,
            nodes: (0..n).map(|i| Some(NodeState::new(NodeId(i as u32)))).collect(),
            channels: vec![UpdateChannels::default(); n],
            capacity: vec![Capacity::Unlimited; n],
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            tick_at: None,
            rng: Streams::new(w.rng_seed),
            arrivals,
            keys,
            replicas: Vec::new(),
            ledger: MetricsLedger::default(),
            queries: Vec::new(),
            windows: Vec::new(),
            trace: cfg.trace.then(String::new),
            monitor: cfg.check_invariants.then(Monitor::default),
            messages_sent: 0,
            events: 0,
            births: Vec::new(),
        };
        sim.schedule_workload();
        Ok(sim)
    }

    fn push(&mut self, at: Time, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event { at, seq: self.seq, kind });
    }

    fn schedule_workload(&mut self) {
        let w = self.cfg.workload.clone();
        for k in 0..w.total_keys() {
            for _ in 0..w.replicas_per_key {
                let id = ReplicaId(self.replicas.len() as u32);
                self.replicas.push(Replica { key: KeyId(k), alive: false });
                let at = if w.warmup > 0.0 { self.rng.births.random_range(0.0..w.warmup) } else { 0.0 };
                self.push(at, EventKind::ReplicaBirth { replica: id });
            }
        }
        self.schedule_next_query(w.query_start());
        self.push(w.query_end(), EventKind::EndOfQuerying);
        self.push(w.sim_duration.max(w.query_end()), EventKind::End);
        self.schedule_capacity();
    }

    fn schedule_next_query(&mut self, from: Time) {
        let Some(exp) = self.arrivals else { return };
        let at = from + exp.sample(&mut self.rng.arrivals);
        if at < self.cfg.workload.query_end() {
            let node = self.live[self.rng.nodes.random_range(0..self.live.len())];
            let key = self.keys.sample(&mut self.rng.keys);
            self.push(at, EventKind::Query { node, key, generated: true });
        }
    }

    fn schedule_capacity(&mut self) {
        let plan = self.cfg.capacity;
        let w = &self.cfg.workload;
        let reduced = Capacity::Fraction(plan.fraction);
        let n = self.live.len();
        let pick = ((n as f64) * plan.affected_share).round() as usize;
        let start = w.query_start() + 300.0;
        let end = w.query_end();
        match plan.pattern {
            CapacityPattern::Full => {}
            CapacityPattern::AllNodes => {
                for i in 0..n {
                    self.capacity[i] = reduced;
                }
            }
            CapacityPattern::OnceDown => {
                let chosen = sample(&mut self.rng.capacity, n, pick).into_vec();
                for i in chosen {
                    self.push(start, EventKind::Capacity { node: NodeId(i as u32), capacity: reduced });
                }
            }
            CapacityPattern::UpAndDown => {
                let mut s = start;
                while s < end {
                    let chosen = sample(&mut self.rng.capacity, n, pick).into_vec();
                    for i in chosen {
                        let node = NodeId(i as u32);
                        self.push(s, EventKind::Capacity { node, capacity: reduced });
                        self.push(s + 600.0, EventKind::Capacity { node, capacity: Capacity::Unlimited });
                    }
                    s += 900.0;
                }
            }
        }
    }

    fn schedule_scenario(&mut self, sc: &Scenario) {
        for &(at, node, key) in &sc.queries {
            self.push(at, EventKind::Query { node, key, generated: false });
        }
        for &(at, key, replica) in &sc.deaths {
            if self.replicas.get(replica.0 as usize).is_some_and(|r| r.key == key) {
                self.push(at, EventKind::ReplicaDeath { replica });
            }
        }
        for &(at, key) in &sc.appends {
            let id = ReplicaId(self.replicas.len() as u32);
            self.replicas.push(Replica { key, alive: false });
            self.push(at, EventKind::ReplicaBirth { replica: id });
        }
        for &(at, splitting) in &sc.joins {
            self.push(at, EventKind::Join { splitting });
        }
        for &(at, node, graceful) in &sc.leaves {
            self.push(at, EventKind::Leave { node, graceful });
        }
        for &(at, node, capacity) in &sc.capacity_changes {
            self.push(at, EventKind::Capacity { node, capacity });
        }
    }

    fn trace(&mut self, node: NodeId, kind: &str, key: Option<KeyId>) {
        if let Some(t) = &mut self.trace {
            match key {
                Some(k) => writeln!(t, "{:.6} {} {} {}", self.now, node, kind, k).unwrap(),
                None => writeln!(t, "{:.6} {} {} -", self.now, node, kind).unwrap(),
            }
        }
    }

    fn run_to_end(&mut self) {
        while let Some(ev) = self.heap.pop() {
            if ev.at < self.now {
                if let Some(m) = &mut self.monitor {
                    m.flag(format!("event at {} dispatched after {}", ev.at, self.now));
                }
            }
            self.now = ev.at;
            self.events += 1;
            self.dispatch(ev.kind);
        }
    }

    fn node_mut(&mut self, id: NodeId) -> Option<&mut NodeState> {
        self.nodes.get_mut(id.index()).and_then(Option::as_mut)
    }

    fn dispatch(&mut self, kind: EventKind) {
        let now = self.now;
        let mut out = Vec::new();
        match kind {
            EventKind::Query { node, key, generated } => {
                if generated {
                    self.schedule_next_query(now);
                }
                self.post_query(node, key);
            }
            EventKind::Arrival { to, msg } => self.deliver(to, msg),
            EventKind::ReplicaBirth { replica } => {
                let key = self.replicas[replica.0 as usize].key;
                self.replicas[replica.0 as usize].alive = true;
                self.births.push((now, key, replica));
                let auth = self.rt.authority[key.0 as usize];
                self.trace(auth, "replica-birth", Some(key));
                self.replica_refresh_at(auth, key, replica, &mut out);
                self.schedule_refresh(replica);
                self.apply_actions(auth, out);
            }
            EventKind::ReplicaRefresh { replica } => {
                let r = &self.replicas[replica.0 as usize];
                if r.alive {
                    let key = r.key;
                    let auth = self.rt.authority[key.0 as usize];
                    self.trace(auth, "replica-refresh", Some(key));
                    self.replica_refresh_at(auth, key, replica, &mut out);
                    self.schedule_refresh(replica);
                    self.apply_actions(auth, out);
                }
            }
            EventKind::ReplicaDeath { replica } => {
                let r = &mut self.replicas[replica.0 as usize];
                if r.alive {
                    r.alive = false;
                    let key = r.key;
                    let auth = self.rt.authority[key.0 as usize];
                    self.trace(auth, "replica-death", Some(key));
                    let (params, rt) = (self.cfg.params, &self.rt);
                    if let Some(n) = self.nodes[auth.index()].as_mut() {
                        n.replica_death(key, replica, now, &params, rt, &mut out);
                    }
                    self.apply_actions(auth, out);
                }
            }
            EventKind::Capacity { node, capacity } => {
                if self.node_mut(node).is_none() {
                    return;
                }
                self.trace(node, "capacity", None);
                self.capacity[node.index()] = capacity;
                if capacity.is_unlimited() {
                    let order = self.cfg.priority;
                    let d = {
                        let (nodes, rt) = (&self.nodes, &self.rt);
                        let state = nodes[node.index()].as_ref().unwrap();
                        self.channels[node.index()].flush(&order, now, |to, u| state.is_interested(u.key, to, rt))
                    };
                    self.after_dispatch(node, d);
                } else {
                    self.ensure_tick();
                }
            }
            EventKind::Tick => {
                // A tick superseded by an earlier one.
                if self.tick_at != Some(now) {
                    return;
                }
                self.tick_at = None;
                let order = self.cfg.priority;
                for i in 0..self.channels.len() {
                    if self.channels[i].is_empty() && self.channels[i].enqueued_since_tick == 0 {
                        continue;
                    }
                    let Some(state) = self.nodes[i].as_ref() else { continue };
                    let rt = &self.rt;
                    let cap = self.capacity[i];
                    let d = self.channels[i].tick(cap, &order, now, |to, u| state.is_interested(u.key, to, rt));
                    self.after_dispatch(NodeId(i as u32), d);
                }
                let wake = (0..self.channels.len())
                    .filter_map(|i| self.channels[i].next_wake(self.capacity[i], now))
                    .min_by(f64::total_cmp);
                if let Some(at) = wake {
                    self.tick_no_earlier_than(at);
                }
            }
            EventKind::Join { splitting } => self.join(splitting),
            EventKind::Leave { node, graceful } => self.leave(node, graceful),
            EventKind::EndOfQuerying => self.trace(NodeId(0), "end-of-querying", None),
            EventKind::End => self.trace(NodeId(0), "end", None),
        }
    }

    fn replica_refresh_at(&mut self, auth: NodeId, key: KeyId, replica: ReplicaId, out: &mut Vec<Action>) {
        let (params, rt, life, now) = (self.cfg.params, &self.rt, self.cfg.workload.replica_lifetime, self.now);
        if let Some(n) = self.nodes[auth.index()].as_mut() {
            n.replica_refresh(key, replica, life, now, &params, rt, out);
        }
    }

    fn schedule_refresh(&mut self, replica: ReplicaId) {
        // Refreshes happen at expiry and stop once querying is over.
        let at = self.now + self.cfg.workload.replica_lifetime;
        if at <= self.cfg.workload.query_end() {
            self.push(at, EventKind::ReplicaRefresh { replica });
        }
    }

    fn ensure_tick(&mut self) {
        self.tick_no_earlier_than(self.now);
    }

    /// Schedules a tick on the first grid point after `now` and at or after
    /// `t`, unless one is already due sooner.
    fn tick_no_earlier_than(&mut self, t: Time) {
        let next = (self.now / TICK).floor() * TICK + TICK;
        let at = next.max((t / TICK).ceil() * TICK);
        if self.tick_at.is_some_and(|due| due <= at) {
            return;
        }
        self.tick_at = Some(at);
        self.push(at, EventKind::Tick);
    }

    fn after_dispatch(&mut self, node: NodeId, d: crate::scheduler::Dispatch) {
        self.ledger.pruned_updates += d.pruned as u64;
        self.ledger.gated_updates += d.gated as u64;
        for (to, update) in d.sent {
            self.send(node, to, MessageBody::Update { update, response: false });
        }
    }

    fn post_query(&mut self, node: NodeId, key: KeyId) {
        let now = self.now;
        let id = QueryId(self.queries.len() as u64);
        let Some(state) = self.nodes.get(node.index()).and_then(Option::as_ref) else { return };
        let had_entries = state.cache.get(&key).is_some_and(|s| !s.entries.is_empty());
        self.queries.push(QueryRecord {
            id,
            at: now,
            node,
            key,
            answered_at: None,
            miss: None,
            answer: Vec::new(),
            cost: None,
        });
        self.ledger.queries += 1;
        self.trace(node, "query-posted", Some(key));
        let mut out = Vec::new();
        let rt = &self.rt;
        self.nodes[node.index()].as_mut().unwrap().handle_query(key, Source::Local(id), now, rt, &mut out);
        let hit = out.iter().any(|a| matches!(a, Action::Answer { query, .. } if *query == id));
        if hit {
            self.ledger.hits += 1;
        } else {
            let kind = if had_entries { MissKind::Freshness } else { MissKind::FirstTime };
            match kind {
                MissKind::FirstTime => self.ledger.first_time_misses += 1,
                MissKind::Freshness => self.ledger.freshness_misses += 1,
            }
            self.ledger.miss_count += 1;
            self.queries[id.0 as usize].miss = Some(kind);
        }
        self.apply_actions(node, out);
        self.check_disjoint(node);
    }

    fn deliver(&mut self, to: NodeId, msg: Message) {
        let now = self.now;
        if self.node_mut(to).is_none() {
            self.ledger.dropped_messages += 1;
            return;
        }
        let key = msg.body.key();
        self.trace(to, msg.body.label(), Some(key));
        let (params, rt) = (self.cfg.params, &self.rt);
        let mut out = Vec::new();
        match msg.body {
            MessageBody::Query { key } => {
                self.nodes[to.index()].as_mut().unwrap().handle_query(
                    key,
                    Source::Neighbor(msg.from),
                    now,
                    rt,
                    &mut out,
                );
            }
            MessageBody::Update { mut update, .. } => {
                update.hops += 1;
                if let Some(m) = &mut self.monitor {
                    if update.kind == UpdateKind::FirstTime {
                        m.outstanding.remove(&(to, key));
                    }
                }
                if self.cfg.classify_justification && !rt.is_authority(to, key) {
                    let w = self.window(to, &update);
                    self.windows.push(w);
                }
                let node = self.nodes[to.index()].as_mut().unwrap();
                node.handle_update(msg.from, update, now, &params, rt, &mut out);
            }
            MessageBody::ClearBit { key } => {
                self.nodes[to.index()].as_mut().unwrap().handle_clear_bit(key, msg.from, &params, rt, &mut out);
            }
        }
        self.apply_actions(to, out);
        self.check_disjoint(to);
    }

    fn window(&self, at: NodeId, update: &Update) -> JustificationWindow {
        let now = self.now;
        let epoch = (self.history.len() - 1) as u32;
        let end = update.latest_expiry().max(now);
        let start = match update.kind {
            UpdateKind::FirstTime | UpdateKind::Append | UpdateKind::Delete => now,
            UpdateKind::Refresh => {
                let prev = update.entries.first().and_then(|e| {
                    self.nodes[at.index()]
                        .as_ref()?
                        .cache
                        .get(&update.key)?
                        .entries
                        .get(&e.replica)
                        .map(IndexEntry::expires_at)
                });
                prev.unwrap_or(now).min(end)
            }
        };
        JustificationWindow { node: at, key: update.key, kind: update.kind, start, end, epoch }
    }

    fn send(&mut self, from: NodeId, to: NodeId, body: MessageBody) {
        let class = match &body {
            MessageBody::Query { .. } | MessageBody::Update { response: true, .. } => HopClass::Miss,
            MessageBody::Update { .. } => HopClass::Update,
            MessageBody::ClearBit { .. } => HopClass::ClearBit,
        };
        self.ledger.record_hop(class);
        self.messages_sent += 1;
        if let MessageBody::Update { update, response: false } = &body {
            self.ledger.pushed_by_kind[update.kind as usize] += 1;
        }
        if self.monitor.is_some() {
            self.check_send(from, to, &body);
        }
        let at = self.now + self.cfg.workload.per_hop_latency;
        self.push(at, EventKind::Arrival { to, msg: Message { from, body } });
    }

    fn check_send(&mut self, from: NodeId, to: NodeId, body: &MessageBody) {
        let now = self.now;
        let state = self.nodes[from.index()].as_ref();
        let mut problems = Vec::new();
        match body {
            MessageBody::Query { key } => {
                let m = self.monitor.as_mut().unwrap();
                let c = m.outstanding.entry((from, *key)).or_insert(0);
                *c += 1;
                if *c > 1 {
                    problems.push(format!("{now}: {from} sent a second upstream query for {key}"));
                }
            }
            MessageBody::Update { update, response: true } => {
                if update.entries.iter().any(|e| !e.is_fresh(now)) {
                    problems.push(format!("{now}: {from} answered {to} with an expired entry of {}", update.key));
                }
            }
            MessageBody::Update { update, response: false } => {
                if !state.is_some_and(|s| s.is_interested(update.key, to, &self.rt)) {
                    problems.push(format!("{now}: {from} pushed {} to {to} without interest", update.key));
                }
            }
            MessageBody::ClearBit { key } => {
                if state.and_then(|s| s.cache.get(key)).is_some_and(|s| !s.no_interest()) {
                    problems.push(format!("{now}: {from} sent clear-bit for {key} with interest set"));
                }
            }
        }
        let m = self.monitor.as_mut().unwrap();
        for p in problems {
            m.flag(p);
        }
    }

    fn check_disjoint(&mut self, node: NodeId) {
        let Some(m) = &mut self.monitor else { return };
        let Some(s) = self.nodes.get(node.index()).and_then(Option::as_ref) else { return };
        if let Some(k) = s.directory.keys().find(|k| s.cache.contains_key(k)) {
            m.flag(format!("{}: {node} holds {k} in both directory and cache", self.now));
        }
    }

    fn apply_actions(&mut self, from: NodeId, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send { to, body } => self.send(from, to, body),
                Action::Push { to, update } => {
                    if self.capacity[from.index()].is_unlimited() {
                        self.send(from, to, MessageBody::Update { update, response: false });
                    } else {
                        self.channels[from.index()].enqueue(to, update, self.now);
                        self.ensure_tick();
                    }
                }
                Action::Answer { query, entries, hops } => self.answer(query, entries, hops),
            }
        }
    }

    fn answer(&mut self, query: QueryId, entries: Vec<IndexEntry>, hops: u32) {
        let now = self.now;
        if let Some(m) = &mut self.monitor {
            if entries.iter().any(|e| !e.is_fresh(now)) {
                m.flag(format!("{now}: query {} answered with an expired entry", query.0));
            }
        }
        let per_hop = self.cfg.workload.per_hop_latency;
        let rec = &mut self.queries[query.0 as usize];
        if rec.answered_at.is_some() {
            return;
        }
        rec.answered_at = Some(now);
        rec.answer = entries.iter().map(|e| e.replica).collect();
        let cost = if rec.miss.is_some() { 2 * hops } else { 0 };
        rec.cost = Some(cost);
        if rec.miss.is_some() {
            self.ledger.miss_cost += u64::from(cost);
            self.ledger.latency_hops.push((now - rec.at) / per_hop);
        }
    }

    fn membership_changed(&mut self) {
        self.rt.recompute();
        self.history.push(self.rt.topo.clone());
        self.live = self.rt.topo.nodes().collect();
        if let Some(m) = &mut self.monitor {
            m.outstanding.clear();
        }
        let now = self.now;
        for i in 0..self.nodes.len() {
            let mut out = Vec::new();
            let rt = &self.rt;
            let Some(n) = self.nodes[i].as_mut() else { continue };
            n.refresh_after_membership(now, rt, &mut out);
            let nbrs = rt.neighbors(n.id);
            let stale: Vec<NodeId> =
                self.channels[i].queues.keys().copied().filter(|k| nbrs.binary_search(k).is_err()).collect();
            for s in stale {
                self.ledger.gated_updates += self.channels[i].drop_neighbor(s) as u64;
            }
            self.apply_actions(NodeId(i as u32), out);
        }
    }

    fn join(&mut self, splitting: NodeId) {
        let Some(zone) = self.rt.topo.zone_of(splitting).copied() else { return };
        let new_id = self.rt.topo.next_free_id();
        let given = zone.split().1;
        let points = self.rt.points.clone();
        let moved = {
            let rt = &self.rt;
            self.nodes[splitting.index()]
                .as_mut()
                .unwrap()
                .export_directory(rt, |k| given.contains(points[k.0 as usize]))
        };
        let outcome = match self.rt.topo.join(splitting, new_id) {
            Ok(o) => o,
            Err(_) => {
                // Put the records back; the join is abandoned.
                let rt = &self.rt;
                let n = self.nodes[splitting.index()].as_mut().unwrap();
                for (k, p) in moved {
                    n.install_directory_entries(k, &p.entries, rt);
                    n.set_directory_interest(k, &p.interested, rt);
                }
                self.trace(splitting, "join-rejected", None);
                return;
            }
        };
        self.trace(new_id, "join", None);
        if self.nodes.len() <= new_id.index() {
            self.nodes.resize(new_id.index() + 1, None);
            self.channels.resize(new_id.index() + 1, UpdateChannels::default());
            self.capacity.resize(new_id.index() + 1, Capacity::Unlimited);
        }
        self.nodes[new_id.index()] = Some(NodeState::new(new_id));
        self.channels[new_id.index()] = UpdateChannels::default();
        self.capacity[new_id.index()] = Capacity::Unlimited;
        for p in &outcome.patches {
            if let Some(n) = self.node_mut(p.node) {
                n.apply_patch(p);
            }
        }
        self.rt.recompute();
        let copy = self.cfg.handover == HandoverPolicy::Copy;
        let rt = &self.rt;
        let new_nbrs = rt.neighbors(new_id).to_vec();
        for (k, pk) in moved {
            let (mut to_new, mut to_split) = (std::collections::BTreeSet::new(), std::collections::BTreeSet::new());
            if copy {
                for &i in &pk.interested {
                    if i == new_id {
                        continue;
                    }
                    if new_nbrs.binary_search(&i).is_ok() {
                        to_new.insert(i);
                    } else if i != splitting {
                        to_split.insert(i);
                    }
                }
                if !to_split.is_empty() {
                    to_new.insert(splitting);
                }
            }
            let n = self.nodes[new_id.index()].as_mut().unwrap();
            n.install_directory_entries(k, &pk.entries, rt);
            n.set_directory_interest(k, &to_new, rt);
            if !to_split.is_empty() {
                self.nodes[splitting.index()].as_mut().unwrap().keep_as_cache(k, &pk, &to_split, rt);
            }
        }
        self.membership_changed();
    }

    fn leave(&mut self, node: NodeId, graceful: bool) {
        if self.node_mut(node).is_none() {
            return;
        }
        let Some(&absorber) = self.rt.topo.merge_candidates(node).first() else {
            self.trace(node, "leave-deferred", None);
            return;
        };
        self.trace(node, if graceful { "leave" } else { "fail" }, None);
        let copy = graceful && self.cfg.handover == HandoverPolicy::Copy;
        let (dir, cache) = {
            let rt = &self.rt;
            let n = self.nodes[node.index()].as_mut().unwrap();
            let dir = n.export_directory(rt, |_| true);
            let cache = if copy { n.export_cache(rt) } else { Vec::new() };
            (dir, cache)
        };
        let outcome = match self.rt.topo.leave(node, copy) {
            Ok(o) => o,
            Err(_) => return,
        };
        self.nodes[node.index()] = None;
        self.ledger.gated_updates += self.channels[node.index()].len() as u64;
        self.channels[node.index()] = UpdateChannels::default();
        for p in &outcome.patches {
            if let Some(n) = self.node_mut(p.node) {
                n.apply_patch(p);
            }
        }
        self.rt.recompute();
        let now = self.now;
        let mut out = Vec::new();
        {
            let rt = &self.rt;
            let a = self.nodes[absorber.index()].as_mut().unwrap();
            for (k, mut pk) in dir {
                if copy {
                    pk.interested.remove(&absorber);
                    a.import_key(k, pk, now, rt, &mut out);
                } else {
                    a.install_directory_entries(k, &pk.entries, rt);
                }
            }
            for (k, pk) in cache {
                a.import_key(k, pk, now, rt, &mut out);
            }
        }
        self.apply_actions(absorber, out);
        self.membership_changed();
    }

    fn classify(&mut self) {
        if self.windows.is_empty() {
            return;
        }
        let mut by_key: BTreeMap<KeyId, Vec<PostedQuery>> = BTreeMap::new();
        for q in &self.queries {
            by_key.entry(q.key).or_default().push(PostedQuery { at: q.at, node: q.node, key: q.key });
        }
        for v in by_key.values_mut() {
            v.sort_by(|a, b| a.at.total_cmp(&b.at));
        }
        let points = &self.rt.points;
        let history = &self.history;
        let mut paths: HashMap<(u32, NodeId, KeyId), Vec<NodeId>> = HashMap::new();
        let (mut yes, mut no) = (0, 0);
        for w in &self.windows {
            let qs = by_key.get(&w.key).map(Vec::as_slice).unwrap_or(&[]);
            let justified = classify_justified(w, qs, |m, w| {
                let topo = &history[w.epoch as usize];
                if !topo.contains_node(m) {
                    return false;
                }
                paths
                    .entry((w.epoch, m, w.key))
                    .or_insert_with(|| topo.path_to(m, points[w.key.0 as usize]))
                    .contains(&w.node)
            });
            if justified {
                yes += 1;
            } else {
                no += 1;
            }
        }
        self.ledger.justified_updates = yes;
        self.ledger.unjustified_updates = no;
    }

    fn finish(mut self) -> RunOutput {
        self.classify();
        self.ledger.unanswered = self.queries.iter().filter(|q| q.answered_at.is_none()).count() as u64;
        let mut violations = self.monitor.take().map(|m| m.violations).unwrap_or_default();
        if self.cfg.check_invariants {
            let l = &self.ledger;
            if l.message_hops() != self.messages_sent {
                violations.push(format!(
                    "ledger counts {} hops but {} messages were sent",
                    l.message_hops(),
                    self.messages_sent
                ));
            }
        }
        RunOutput {
            ledger: self.ledger,
            queries: self.queries,
            trace: self.trace,
            violations,
            messages_sent: self.messages_sent,
            events: self.events,
            births: self.births,
        }
    }
}
