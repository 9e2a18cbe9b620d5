//! Browser bindings for the CUP simulator. Every export returns a JSON string
//! so the page needs no glue beyond `JSON.parse`.

use cup_core::experiments::desk_workload;
use cup_core::metrics::prob_justified;
use cup_core::overlay::{hash_key, NodeId, Topology};
use cup_core::policies::{CutoffPolicy, PopularityMode};
use cup_core::protocol::{KeyId, ProtocolParams};
use cup_core::simulator::{run, RunOutput, Scenario, SimConfig, WorkloadConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Short runs keep the page responsive.
fn workload(nodes: usize, rate: f64, seed: u64) -> WorkloadConfig {
    WorkloadConfig {
        n_nodes: nodes,
        query_rate: rate,
        rng_seed: seed,
        sim_duration: 2500.0,
        query_duration: 1200.0,
        ..desk_workload()
    }
}

fn simulate(w: &WorkloadConfig, policy: CutoffPolicy) -> Result<RunOutput, String> {
    let cfg = SimConfig {
        workload: w.clone(),
        params: ProtocolParams { policy, mode: PopularityMode::Naive },
        ..SimConfig::default()
    };
    run(&cfg, &Scenario::default()).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct LevelPoint {
    level: u32,
    total: u64,
    miss: u64,
    overhead: u64,
}

pub fn push_level_curve_json(nodes: usize, rate: f64, seed: u64, max_level: u32) -> Result<String, String> {
    let w = workload(nodes, rate, seed);
    let mut points = Vec::new();
    for level in (0..=max_level).step_by(2) {
        let l = simulate(&w, CutoffPolicy::PushLevel(level))?.ledger;
        points.push(LevelPoint { level, total: l.total_cost(), miss: l.miss_cost, overhead: l.overhead() });
    }
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct TreeNode {
    id: u32,
    /// `[x_lo, x_hi, y_lo, y_hi]` in the unit square.
    zone: [f64; 4],
    /// Next hop toward the authority; `None` at the authority itself.
    parent: Option<u32>,
    depth: u32,
    queries: u32,
    misses: u32,
    standard_misses: u32,
}

#[derive(Serialize)]
struct Tree {
    authority: u32,
    policy: String,
    total: u64,
    standard_total: u64,
    nodes: Vec<TreeNode>,
}

fn per_node(out: &RunOutput, n: usize, count_misses: bool) -> Vec<u32> {
    let mut c = vec![0; n];
    for q in out.queries.iter().filter(|q| q.key == KeyId(0)) {
        if !count_misses || q.miss.is_some() {
            c[q.node.index()] += 1;
        }
    }
    c
}

pub fn cup_tree_json(nodes: usize, rate: f64, policy: &str, seed: u64) -> Result<String, String> {
    let policy: CutoffPolicy = policy.parse().map_err(|e: cup_core::policies::PolicyError| e.to_string())?;
    let topo = Topology::grid(nodes).map_err(|e| e.to_string())?;
    let w = workload(nodes, rate, seed);
    let cup = simulate(&w, policy)?;
    let std = simulate(&w, CutoffPolicy::STANDARD_CACHING)?;
    let target = hash_key(&KeyId(0).name());
    let authority = topo.owner_of(target);
    let (queries, misses, std_misses) =
        (per_node(&cup, nodes, false), per_node(&cup, nodes, true), per_node(&std, nodes, true));
    let tree_nodes = topo
        .nodes()
        .map(|id: NodeId| {
            let z = topo.zone_of(id).expect("grid node");
            let i = id.index();
            TreeNode {
                id: id.0,
                zone: [z.x_lo, z.x_hi, z.y_lo, z.y_hi],
                parent: (id != authority).then(|| topo.route_next_hop(id, target).0),
                depth: topo.distance_to(id, target),
                queries: queries[i],
                misses: misses[i],
                standard_misses: std_misses[i],
            }
        })
        .collect();
    let tree = Tree {
        authority: authority.0,
        policy: policy.label(),
        total: cup.ledger.total_cost(),
        standard_total: std.ledger.total_cost(),
        nodes: tree_nodes,
    };
    serde_json::to_string(&tree).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct ProbPoint {
    t: f64,
    p: f64,
}

pub fn prob_justified_curve_json(lambda: f64, t_max: f64, steps: u32) -> Result<String, String> {
    if !(lambda >= 0.0 && t_max > 0.0 && steps > 0) {
        return Err("need lambda >= 0, t_max > 0 and steps > 0".into());
    }
    let points: Vec<ProbPoint> = (0..=steps)
        .map(|i| {
            let t = t_max * f64::from(i) / f64::from(steps);
            ProbPoint { t, p: prob_justified(lambda, t) }
        })
        .collect();
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

/// Total, miss and overhead cost for push levels 0, 2, ..., `max_level`.
#[wasm_bindgen]
pub fn push_level_curve(nodes: usize, rate: f64, seed: u64, max_level: u32) -> Result<String, JsValue> {
    push_level_curve_json(nodes, rate, seed, max_level).map_err(|e| JsValue::from_str(&e))
}

/// The grid, the query tree of the one queried key, and per-node misses
/// under `policy` next to standard caching.
#[wasm_bindgen]
pub fn cup_tree(nodes: usize, rate: f64, policy: &str, seed: u64) -> Result<String, JsValue> {
    cup_tree_json(nodes, rate, policy, seed).map_err(|e| JsValue::from_str(&e))
}

/// Probability that an update is justified as the window grows.
#[wasm_bindgen]
pub fn prob_justified_curve(lambda: f64, t_max: f64, steps: u32) -> Result<String, JsValue> {
    prob_justified_curve_json(lambda, t_max, steps).map_err(|e| JsValue::from_str(&e))
}
