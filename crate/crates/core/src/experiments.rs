//! The five studies at desk scale. Every CUP run is paired with a
//! standard-caching twin on the same seed and workload, and tables are
//! written as CSV.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

use crate::metrics::{summarize, ReportRow};
use crate::policies::{CutoffPolicy, PopularityMode};
use crate::simulator::{run, CapacityPattern, CapacityPlan, ConfigError, KeyDistribution, SimConfig, WorkloadConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ScenarioName {
    PushLevelSweep,
    PolicyTable,
    SizeScaling,
    ReplicaSweep,
    CapacityUpDown,
    CapacityOnceDown,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 6] = [
        ScenarioName::PushLevelSweep,
        ScenarioName::PolicyTable,
        ScenarioName::SizeScaling,
        ScenarioName::ReplicaSweep,
        ScenarioName::CapacityUpDown,
        ScenarioName::CapacityOnceDown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::PushLevelSweep => "push_level_sweep",
            ScenarioName::PolicyTable => "policy_table",
            ScenarioName::SizeScaling => "size_scaling",
            ScenarioName::ReplicaSweep => "replica_sweep",
            ScenarioName::CapacityUpDown => "capacity_updown",
            ScenarioName::CapacityOnceDown => "capacity_oncedown",
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| ExperimentError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("config file: {0}")]
    Parse(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Settings from a config file or the command line. Names follow
/// `WorkloadConfig` where there is one; anything unset keeps its default.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub scenario: Option<String>,
    pub n_nodes: Option<usize>,
    pub keys_per_node: Option<u32>,
    pub queried_keys: Option<u32>,
    pub query_rate: Option<f64>,
    pub key_distribution: Option<String>,
    pub replicas_per_key: Option<u32>,
    pub replica_lifetime: Option<f64>,
    pub sim_duration: Option<f64>,
    pub query_duration: Option<f64>,
    pub warmup: Option<f64>,
    pub per_hop_latency: Option<f64>,
    pub rng_seed: Option<u64>,
    pub policy: Option<String>,
    pub alpha: Option<f64>,
    pub push_level: Option<u32>,
    pub popularity_mode: Option<String>,
    pub capacity_pattern: Option<String>,
    pub capacity_fraction: Option<f64>,
    pub affected_share: Option<f64>,
    pub reps: Option<u32>,
    pub levels: Option<Vec<u32>>,
    pub policies: Option<Vec<String>>,
    pub sizes: Option<Vec<usize>>,
    pub replica_counts: Option<Vec<u32>>,
    pub fractions: Option<Vec<f64>>,
    pub rates: Option<Vec<f64>>,
    pub full_scale: Option<bool>,
}

macro_rules! take_newer {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

impl Overrides {
    pub fn from_toml(text: &str) -> Result<Overrides, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))
    }

    /// Fields set in `newer` win.
    pub fn merge(mut self, newer: Overrides) -> Overrides {
        take_newer!(self, newer; scenario, n_nodes, keys_per_node, queried_keys, query_rate, key_distribution,
            replicas_per_key, replica_lifetime, sim_duration, query_duration, warmup, per_hop_latency, rng_seed,
            policy, alpha, push_level, popularity_mode, capacity_pattern, capacity_fraction, affected_share, reps,
            levels, policies, sizes, replica_counts, fractions, rates, full_scale);
        self
    }

    /// The CUP policy these settings ask for, if any. `linear` and `log`
    /// take their factor from `alpha`; a lone `push_level` means that level.
    pub fn cutoff_policy(&self) -> Result<Option<CutoffPolicy>, ConfigError> {
        let bad = |msg: String| ConfigError::Field { field: "policy", msg };
        let p = match (self.policy.as_deref(), self.alpha, self.push_level) {
            (None, _, None) => return Ok(None),
            (None, _, Some(p)) | (Some("push"), _, Some(p)) => CutoffPolicy::PushLevel(p),
            (Some("linear"), Some(alpha), _) => CutoffPolicy::Linear { alpha },
            (Some("log"), Some(alpha), _) => CutoffPolicy::Logarithmic { alpha },
            (Some(name @ ("linear" | "log" | "push")), ..) => {
                return Err(bad(format!("{name} needs {}", if name == "push" { "--push-level" } else { "--alpha" })))
            }
            (Some(s), ..) => s.parse().map_err(|e| bad(format!("{e}")))?,
        };
        p.validate()?;
        Ok(Some(p))
    }
}

/// Querying for 1500 s on 256 nodes, all of it aimed at a single key.
pub fn desk_workload() -> WorkloadConfig {
    WorkloadConfig {
        n_nodes: 256,
        queried_keys: Some(1),
        sim_duration: 4000.0,
        query_duration: 1500.0,
        ..WorkloadConfig::default()
    }
}

pub fn full_scale_workload() -> WorkloadConfig {
    WorkloadConfig { n_nodes: 1024, queried_keys: Some(1), ..WorkloadConfig::default() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub scenario: ScenarioName,
    pub base: SimConfig,
    pub reps: u32,
    pub rates: Vec<f64>,
    pub levels: Vec<u32>,
    /// Rows of the policy table; push levels are searched separately.
    pub policies: Vec<CutoffPolicy>,
    pub sizes: Vec<usize>,
    pub replica_counts: Vec<u32>,
    pub fractions: Vec<f64>,
}

impl Experiment {
    pub fn new(scenario: ScenarioName, full_scale: bool) -> Experiment {
        let workload = if full_scale { full_scale_workload() } else { desk_workload() };
        let max_k = if full_scale { 12 } else { 9 };
        let mut policies = vec![CutoffPolicy::STANDARD_CACHING];
        policies.extend([0.25, 0.10, 0.01, 0.001].map(|alpha| CutoffPolicy::Linear { alpha }));
        policies.extend([0.5, 0.25, 0.10, 0.01].map(|alpha| CutoffPolicy::Logarithmic { alpha }));
        policies.push(CutoffPolicy::SecondChance);
        Experiment {
            scenario,
            base: SimConfig { workload, ..SimConfig::default() },
            reps: 3,
            rates: if full_scale { vec![1.0, 10.0, 100.0, 1000.0] } else { vec![1.0, 10.0] },
            levels: (0..=if full_scale { 32 } else { 16 }).step_by(2).collect(),
            policies,
            sizes: (3..=max_k).map(|k| 1usize << k).collect(),
            replica_counts: vec![1, 2, 5, 10, 50, 100],
            fractions: vec![0.0, 0.25, 0.5, 1.0],
        }
    }

    pub fn from_overrides(o: &Overrides) -> Result<Experiment, ExperimentError> {
        let scenario = o.scenario.as_deref().unwrap_or("policy_table").parse()?;
        let mut e = Experiment::new(scenario, o.full_scale.unwrap_or(false));
        let w = &mut e.base.workload;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { w.$f = v; } )* };
        }
        set!(
            n_nodes,
            keys_per_node,
            query_rate,
            replicas_per_key,
            replica_lifetime,
            sim_duration,
            query_duration,
            warmup,
            per_hop_latency,
            rng_seed
        );
        if o.queried_keys.is_some() {
            w.queried_keys = o.queried_keys;
        }
        if let Some(d) = &o.key_distribution {
            w.key_distribution = d.parse::<KeyDistribution>()?;
        }
        if let Some(p) = o.cutoff_policy()? {
            e.base.params.policy = p;
        }
        if let Some(m) = &o.popularity_mode {
            e.base.params.mode = m.parse::<PopularityMode>().map_err(ConfigError::from)?;
        }
        if let Some(p) = &o.capacity_pattern {
            e.base.capacity.pattern = p.parse()?;
        }
        if let Some(c) = o.capacity_fraction {
            e.base.capacity.fraction = c;
            e.fractions = vec![c];
        }
        if let Some(s) = o.affected_share {
            e.base.capacity.affected_share = s;
        }
        if let Some(r) = o.reps {
            e.reps = r;
        }
        if let Some(r) = o.query_rate {
            e.rates = vec![r];
        }
        if let Some(n) = o.n_nodes {
            e.sizes = vec![n];
        }
        if let Some(r) = o.replicas_per_key {
            e.replica_counts = vec![r];
        }
        if let Some(l) = o.push_level {
            e.levels = vec![l];
        }
        if let Some(v) = &o.rates {
            e.rates = v.clone();
        }
        if let Some(v) = &o.levels {
            e.levels = v.clone();
        }
        if let Some(v) = &o.sizes {
            e.sizes = v.clone();
        }
        if let Some(v) = &o.replica_counts {
            e.replica_counts = v.clone();
        }
        if let Some(v) = &o.fractions {
            e.fractions = v.clone();
        }
        if let Some(v) = &o.policies {
            e.policies =
                v.iter().map(|s| s.parse::<CutoffPolicy>().map_err(ConfigError::from)).collect::<Result<_, _>>()?;
        }
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &'static str, msg: &str| Err(ConfigError::Field { field, msg: msg.to_string() });
        if self.reps == 0 {
            return bad("reps", "must be at least 1");
        }
        let empty = match self.scenario {
            ScenarioName::PushLevelSweep => self.levels.is_empty() || self.rates.is_empty(),
            ScenarioName::PolicyTable => self.policies.is_empty() || self.rates.is_empty(),
            ScenarioName::SizeScaling => self.sizes.is_empty(),
            ScenarioName::ReplicaSweep => self.replica_counts.is_empty(),
            ScenarioName::CapacityUpDown | ScenarioName::CapacityOnceDown => self.fractions.is_empty(),
        };
        if empty {
            return bad("scenario", "sweep has no points");
        }
        if self.scenario == ScenarioName::PushLevelSweep && !self.levels.contains(&0) {
            return bad("levels", "must include 0");
        }
        self.points().iter().try_for_each(|p| p.config(&self.base).validate())?;
        self.base.validate()
    }

    /// Sweep points in output order.
    pub fn points(&self) -> Vec<Point> {
        let base = Point::of(&self.base);
        let mut out = Vec::new();
        match self.scenario {
            ScenarioName::PushLevelSweep => {
                for &rate in &self.rates {
                    for &l in &self.levels {
                        out.push(Point { rate, policy: PointPolicy::Fixed(CutoffPolicy::PushLevel(l)), ..base });
                    }
                }
            }
            ScenarioName::PolicyTable => {
                for &rate in &self.rates {
                    for &p in &self.policies {
                        out.push(Point { rate, policy: PointPolicy::Fixed(p), ..base });
                    }
                    out.push(Point { rate, policy: PointPolicy::BestPushLevel, ..base });
                }
            }
            ScenarioName::SizeScaling => {
                out.extend(self.sizes.iter().map(|&nodes| Point { nodes, ..base }));
            }
            ScenarioName::ReplicaSweep => {
                for &replicas in &self.replica_counts {
                    for mode in [PopularityMode::Naive, PopularityMode::ReplicaIndependent] {
                        out.push(Point { replicas, mode, ..base });
                    }
                }
            }
            ScenarioName::CapacityUpDown | ScenarioName::CapacityOnceDown => {
                let pattern = if self.scenario == ScenarioName::CapacityUpDown {
                    CapacityPattern::UpAndDown
                } else {
                    CapacityPattern::OnceDown
                };
                for &c in &self.fractions {
                    out.push(Point { capacity: CapacityPlan { pattern, fraction: c, ..self.base.capacity }, ..base });
                }
                out.push(Point {
                    policy: PointPolicy::Fixed(CutoffPolicy::STANDARD_CACHING),
                    capacity: CapacityPlan::default(),
                    ..base
                });
            }
        }
        out
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.reps as u64).map(|i| self.base.workload.rng_seed + i)
    }

    pub fn run(&self) -> Result<ResultTable, ExperimentError> {
        self.validate()?;
        let points = self.points();
        // Every distinct configuration runs once, twins included.
        let mut jobs: Vec<SimConfig> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut job = |cfg: SimConfig| -> usize {
            *index.entry(format!("{cfg:?}")).or_insert_with(|| {
                jobs.push(cfg);
                jobs.len() - 1
            })
        };
        let mut plan = Vec::new();
        for p in &points {
            let mut seeds = Vec::new();
            for seed in self.seeds() {
                let mut cfg = p.config(&self.base);
                cfg.workload.rng_seed = seed;
                let twin = job(twin_of(&cfg));
                let cup = match p.policy {
                    PointPolicy::Fixed(_) => vec![job(cfg)],
                    PointPolicy::BestPushLevel => self
                        .levels
                        .iter()
                        .map(|&l| {
                            job(SimConfig {
                                params: {
                                    let mut q = cfg.params;
                                    q.policy = CutoffPolicy::PushLevel(l);
                                    q
                                },
                                ..cfg.clone()
                            })
                        })
                        .collect(),
                };
                seeds.push((seed, cup, twin));
            }
            plan.push(seeds);
        }
        let results = run_all(&jobs)?;
        let points = points
            .into_iter()
            .zip(plan)
            .map(|(point, seeds)| {
                let runs = seeds
                    .into_iter()
                    .map(|(seed, cup, twin)| {
                        let cup = cup.iter().map(|&i| &results[i]).min_by_key(|r| r.total_cost).unwrap().clone();
                        SeedResult { seed, cup, twin: results[twin].clone() }
                    })
                    .collect();
                PointResult { point, runs }
            })
            .collect();
        Ok(ResultTable { scenario: self.scenario, points })
    }
}

fn twin_of(cfg: &SimConfig) -> SimConfig {
    let mut twin = cfg.clone();
    twin.params.policy = CutoffPolicy::STANDARD_CACHING;
    twin.capacity = CapacityPlan::default();
    twin
}

fn run_one(cfg: &SimConfig) -> Result<ReportRow, ConfigError> {
    run(cfg, &Default::default()).map(|o| summarize(&o.ledger))
}

#[cfg(feature = "parallel")]
fn run_all(jobs: &[SimConfig]) -> Result<Vec<ReportRow>, ConfigError> {
    use rayon::prelude::*;
    let threads = std::env::var("CUP_SIM_THREADS").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| jobs.par_iter().map(run_one).collect()),
        Err(_) => jobs.iter().map(run_one).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_all(jobs: &[SimConfig]) -> Result<Vec<ReportRow>, ConfigError> {
    jobs.iter().map(run_one).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointPolicy {
    Fixed(CutoffPolicy),
    /// The cheapest of the experiment's push levels, chosen per seed.
    BestPushLevel,
}

impl fmt::Display for PointPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PointPolicy::Fixed(p) => p.fmt(f),
            PointPolicy::BestPushLevel => f.write_str("best-push-level"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub nodes: usize,
    pub rate: f64,
    pub policy: PointPolicy,
    pub mode: PopularityMode,
    pub replicas: u32,
    pub capacity: CapacityPlan,
}

impl Point {
    fn of(cfg: &SimConfig) -> Point {
        let w = &cfg.workload;
        Point {
            nodes: w.n_nodes,
            rate: w.query_rate,
            policy: PointPolicy::Fixed(cfg.params.policy),
            mode: cfg.params.mode,
            replicas: w.replicas_per_key,
            capacity: cfg.capacity,
        }
    }

    pub fn config(&self, base: &SimConfig) -> SimConfig {
        let mut cfg = base.clone();
        cfg.workload.n_nodes = self.nodes;
        cfg.workload.query_rate = self.rate;
        cfg.workload.replicas_per_key = self.replicas;
        cfg.params.mode = self.mode;
        if let PointPolicy::Fixed(p) = self.policy {
            cfg.params.policy = p;
        }
        cfg.capacity = self.capacity;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub cup: ReportRow,
    pub twin: ReportRow,
}

impl SeedResult {
    pub fn total_ratio(&self) -> Option<f64> {
        ratio(self.cup.total_cost, self.twin.total_cost)
    }

    pub fn miss_ratio(&self) -> Option<f64> {
        ratio(self.cup.miss_cost, self.twin.miss_cost)
    }

    pub fn saved_miss_ratio(&self) -> Option<f64> {
        let overhead = self.cup.update_overhead + self.cup.clearbit_overhead;
        (overhead > 0).then(|| (self.twin.miss_cost as f64 - self.cup.miss_cost as f64) / overhead as f64)
    }
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub point: Point,
    pub runs: Vec<SeedResult>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.into_iter().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

impl PointResult {
    pub fn mean_of(&self, f: impl Fn(&SeedResult) -> Option<f64>) -> Option<f64> {
        mean(self.runs.iter().filter_map(f))
    }

    pub fn mean_total_ratio(&self) -> Option<f64> {
        self.mean_of(SeedResult::total_ratio)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub scenario: ScenarioName,
    pub points: Vec<PointResult>,
}

pub const CSV_HEADER: [&str; 22] = [
    "scenario",
    "nodes",
    "rate",
    "policy",
    "mode",
    "replicas",
    "capacity_pattern",
    "capacity_fraction",
    "reps",
    "total_cost",
    "miss_cost",
    "miss_count",
    "avg_miss_latency",
    "justified_fraction",
    "update_overhead",
    "clearbit_overhead",
    "std_total_cost",
    "std_miss_cost",
    "std_avg_miss_latency",
    "total_ratio",
    "miss_ratio",
    "saved_miss_ratio",
];

/// Six significant digits, trailing zeros trimmed.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".into() } else { x.to_string() };
    }
    let s = format!("{x:.5e}");
    let (m, e) = s.split_once('e').unwrap();
    let e: i32 = e.parse().unwrap();
    let decimals = (5 - e).max(0) as usize;
    let v: f64 = format!("{m}e{e}").parse().unwrap();
    let out = format!("{v:.decimals$}");
    let out = if out.contains('.') { out.trim_end_matches('0').trim_end_matches('.').to_string() } else { out };
    if out == "-0" {
        "0".into()
    } else {
        out
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(sig6).unwrap_or_default()
}

impl ResultTable {
    pub fn rows(&self) -> Vec<Vec<String>> {
        self.points
            .iter()
            .map(|pr| {
                let p = &pr.point;
                let m = |f: fn(&ReportRow) -> f64, twin: bool| {
                    opt(pr.mean_of(|r| Some(f(if twin { &r.twin } else { &r.cup }))))
                };
                let fixed = p.capacity.pattern != CapacityPattern::Full;
                vec![
                    self.scenario.to_string(),
                    p.nodes.to_string(),
                    sig6(p.rate),
                    p.policy.to_string(),
                    p.mode.to_string(),
                    p.replicas.to_string(),
                    p.capacity.pattern.as_str().to_string(),
                    if fixed { sig6(p.capacity.fraction) } else { String::new() },
                    pr.runs.len().to_string(),
                    m(|r| r.total_cost as f64, false),
                    m(|r| r.miss_cost as f64, false),
                    m(|r| r.miss_count as f64, false),
                    m(|r| r.avg_miss_latency, false),
                    opt(pr.mean_of(|r| r.cup.justified_fraction)),
                    m(|r| r.update_overhead as f64, false),
                    m(|r| r.clearbit_overhead as f64, false),
                    m(|r| r.total_cost as f64, true),
                    m(|r| r.miss_cost as f64, true),
                    m(|r| r.avg_miss_latency, true),
                    opt(pr.mean_of(SeedResult::total_ratio)),
                    opt(pr.mean_of(SeedResult::miss_ratio)),
                    opt(pr.mean_of(SeedResult::saved_miss_ratio)),
                ]
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ExperimentError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        for row in self.rows() {
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// A few columns per row, aligned for a terminal.
    pub fn summary(&self) -> String {
        let cols = [1, 2, 3, 4, 5, 7, 9, 10, 14, 19, 21];
        let rows = self.rows();
        let cells: Vec<Vec<&str>> = std::iter::once(cols.map(|c| CSV_HEADER[c]).to_vec())
            .chain(rows.iter().map(|r| cols.iter().map(|&c| r[c].as_str()).collect()))
            .collect();
        let widths: Vec<usize> = (0..cols.len()).map(|i| cells.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
        let mut s = String::new();
        for r in &cells {
            let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            s.push_str(line.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}
