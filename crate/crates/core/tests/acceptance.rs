//! One test per acceptance criterion. Each prints a PASS/FAIL line to
//! stderr (uncaptured) before asserting, so `cargo test --test acceptance`
//! shows the whole scorecard.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::io::Write;
use std::time::{Duration, Instant};

use cup_core::experiments::{desk_workload, Experiment, PointResult, ResultTable, ScenarioName};
use cup_core::metrics::prob_justified;
use cup_core::overlay::{hash_key, NodeId, Point, Topology};
use cup_core::policies::{CutoffPolicy, PopularityMode};
use cup_core::protocol::KeyId;
use cup_core::simulator::{
    run, CapacityPattern, CapacityPlan, KeyDistribution, RunOutput, Scenario, SimConfig, WorkloadConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

fn report(n: u32, name: &str, ok: bool, elapsed: Duration, budget: Duration, detail: &str) {
    let within = elapsed <= budget;
    let verdict = if ok && within { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n:>2} [{verdict}] {name}: {detail} ({:.1}s of {}s budget)",
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
    assert!(within, "criterion {n} ({name}) took {elapsed:?}, budget {budget:?}");
}

fn cfg(workload: WorkloadConfig, policy: CutoffPolicy) -> SimConfig {
    let mut c = SimConfig { workload, classify_justification: false, ..SimConfig::default() };
    c.params.policy = policy;
    c
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn table(e: &Experiment) -> ResultTable {
    e.run().expect("experiment runs")
}

fn point(t: &ResultTable, pred: impl Fn(&PointResult) -> bool) -> &PointResult {
    t.points.iter().find(|p| pred(p)).expect("sweep point present")
}

// ---------------------------------------------------------------------------
// 1. Standard-caching oracle

/// Replays the query log of a standard-caching run on its own: every node
/// keeps the entries it was last handed, queries climb the greedy path
/// until a fresh copy or the authority answers, concurrent queries wait on
/// the first one, and an answer that went stale on the way is asked for
/// again. Returns `(cost, answered_at)` per query.
struct Oracle<'a> {
    topo: &'a Topology,
    points: Vec<Point>,
    authority: Vec<NodeId>,
    lifetime: f64,
    hop: f64,
    /// Per key, every time the authority's entry for each replica was set.
    refresh_times: BTreeMap<u32, Vec<(u32, Vec<f64>)>>,
}

#[derive(Clone, Copy, PartialEq)]
struct Ev {
    at: f64,
    seq: u64,
}

enum Msg {
    Post { node: NodeId, key: u32, q: usize },
    Query { to: NodeId, from: NodeId, key: u32 },
    Answer { to: NodeId, key: u32, entries: Vec<(u32, f64)>, hops: u32 },
}

#[derive(Default)]
struct Cached {
    entries: Vec<(u32, f64)>,
    pending: bool,
    awaiting: BTreeSet<NodeId>,
    waiters: Vec<usize>,
}

impl Eq for Ev {}
impl PartialOrd for Ev {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Ev {
    fn cmp(&self, o: &Self) -> Ordering {
        o.at.total_cmp(&self.at).then(o.seq.cmp(&self.seq))
    }
}

impl Oracle<'_> {
    fn fresh(&self, entries: &[(u32, f64)], now: f64) -> Vec<(u32, f64)> {
        entries.iter().copied().filter(|&(_, set)| now - set <= self.lifetime).collect()
    }

    fn authority_entries(&self, key: u32, now: f64) -> Vec<(u32, f64)> {
        let mut out = Vec::new();
        for (r, times) in self.refresh_times.get(&key).into_iter().flatten() {
            if let Some(&t) = times.iter().rev().find(|&&t| t <= now) {
                out.push((*r, t));
            }
        }
        self.fresh(&out, now)
    }

    fn next_hop(&self, at: NodeId, key: u32) -> NodeId {
        self.topo.path_to(at, self.points[key as usize])[1]
    }

    fn replay(&self, posts: &[(f64, NodeId, u32)]) -> Vec<(u32, f64)> {
        let mut heap = BinaryHeap::new();
        let mut msgs: Vec<Option<Msg>> = Vec::new();
        let mut seq = 0u64;
        let mut push = |heap: &mut BinaryHeap<(Ev, usize)>, msgs: &mut Vec<Option<Msg>>, at: f64, m: Msg| {
            seq += 1;
            msgs.push(Some(m));
            heap.push((Ev { at, seq }, msgs.len() - 1));
        };
        for (q, &(at, node, key)) in posts.iter().enumerate() {
            push(&mut heap, &mut msgs, at, Msg::Post { node, key, q });
        }
        let mut state: BTreeMap<(NodeId, u32), Cached> = BTreeMap::new();
        let mut result = vec![(u32::MAX, f64::NAN); posts.len()];
        while let Some((ev, i)) = heap.pop() {
            let now = ev.at;
            match msgs[i].take().unwrap() {
                Msg::Post { node, key, q } => {
                    if self.authority[key as usize] == node {
                        result[q] = (0, now);
                        continue;
                    }
                    let st = state.entry((node, key)).or_default();
                    if !self.fresh(&st.entries, now).is_empty() {
                        result[q] = (0, now);
                        continue;
                    }
                    st.waiters.push(q);
                    if !st.pending {
                        st.pending = true;
                        let to = self.next_hop(node, key);
                        push(&mut heap, &mut msgs, now + self.hop, Msg::Query { to, from: node, key });
                    }
                }
                Msg::Query { to, from, key } => {
                    if self.authority[key as usize] == to {
                        let entries = self.authority_entries(key, now);
                        push(&mut heap, &mut msgs, now + self.hop, Msg::Answer { to: from, key, entries, hops: 1 });
                        continue;
                    }
                    let st = state.entry((to, key)).or_default();
                    let fresh = self.fresh(&st.entries, now);
                    if !fresh.is_empty() {
                        push(
                            &mut heap,
                            &mut msgs,
                            now + self.hop,
                            Msg::Answer { to: from, key, entries: fresh, hops: 1 },
                        );
                        continue;
                    }
                    st.awaiting.insert(from);
                    if !st.pending {
                        st.pending = true;
                        let up = self.next_hop(to, key);
                        push(&mut heap, &mut msgs, now + self.hop, Msg::Query { to: up, from: to, key });
                    }
                }
                Msg::Answer { to, key, entries, hops } => {
                    let st = state.entry((to, key)).or_default();
                    assert!(st.pending, "answer reached a node that asked nothing");
                    let fresh = self.fresh(&entries, now);
                    if fresh.is_empty() && !entries.is_empty() {
                        let up = self.next_hop(to, key);
                        push(&mut heap, &mut msgs, now + self.hop, Msg::Query { to: up, from: to, key });
                        continue;
                    }
                    st.entries = fresh.clone();
                    st.pending = false;
                    let awaiting = std::mem::take(&mut st.awaiting);
                    for q in std::mem::take(&mut st.waiters) {
                        result[q] = (2 * hops, now);
                    }
                    for a in awaiting {
                        let m = Msg::Answer { to: a, key, entries: fresh.clone(), hops: hops + 1 };
                        push(&mut heap, &mut msgs, now + self.hop, m);
                    }
                }
            }
        }
        result
    }
}

fn oracle_for(c: &SimConfig, out: &RunOutput) -> Vec<(u32, f64)> {
    let w = &c.workload;
    let topo = Topology::grid(w.n_nodes).unwrap();
    let points: Vec<Point> = (0..w.total_keys()).map(|k| hash_key(&format!("k{k}"))).collect();
    let authority = points.iter().map(|&p| topo.owner_of(p)).collect();
    let mut refresh_times: BTreeMap<u32, Vec<(u32, Vec<f64>)>> = BTreeMap::new();
    for &(born, key, replica) in &out.births {
        let mut times = vec![born];
        let mut t = born;
        loop {
            t += w.replica_lifetime;
            if t > w.warmup + w.query_duration {
                break;
            }
            times.push(t);
        }
        refresh_times.entry(key.0).or_default().push((replica.0, times));
    }
    let oracle =
        Oracle { topo: &topo, points, authority, lifetime: w.replica_lifetime, hop: w.per_hop_latency, refresh_times };
    let posts: Vec<_> = out.queries.iter().map(|q| (q.at, q.node, q.key.0)).collect();
    oracle.replay(&posts)
}

#[test]
fn criterion_01_standard_caching_oracle() {
    let start = Instant::now();
    let mut checked = 0usize;
    let mut coalesced = 0usize;
    let mut mismatches = Vec::new();
    for (k, rate, hop, replicas, queried) in
        [(3, 2.0, 0.05, 1, 1), (4, 1.0, 0.05, 2, 3), (5, 1.0, 0.05, 1, 2), (5, 5.0, 1.5, 1, 1), (4, 3.0, 4.0, 3, 2)]
    {
        for seed in 1..=4 {
            let w = WorkloadConfig {
                n_nodes: 1 << k,
                query_rate: rate,
                per_hop_latency: hop,
                replicas_per_key: replicas,
                queried_keys: Some(queried),
                sim_duration: 2000.0,
                query_duration: 900.0,
                rng_seed: seed,
                ..WorkloadConfig::default()
            };
            let c = cfg(w, CutoffPolicy::STANDARD_CACHING);
            let out = run(&c, &Scenario::default()).unwrap();
            let expect = oracle_for(&c, &out);
            for (q, &(cost, at)) in out.queries.iter().zip(&expect) {
                checked += 1;
                let got_at = q.answered_at.unwrap_or(f64::NAN);
                if q.cost != Some(cost) || (got_at - at).abs() > 1e-9 {
                    mismatches
                        .push(format!("k={k} seed={seed} query {}: {:?}@{got_at} vs {cost}@{at}", q.id.0, q.cost));
                }
                if q.miss.is_some() && q.cost.is_some_and(|c| c as f64 * hop > got_at - q.at + 1e-9) {
                    coalesced += 1;
                }
            }
            let total: u64 = expect.iter().map(|&(c, _)| c as u64).sum();
            if total != out.ledger.miss_cost || out.ledger.total_cost() != out.ledger.miss_cost {
                mismatches.push(format!("k={k} seed={seed}: ledger miss cost {} vs {total}", out.ledger.miss_cost));
            }
        }
    }
    let detail = format!(
        "{checked} queries ({coalesced} coalesced) matched exactly{}",
        mismatches.first().map(|m| format!("; first mismatch {m}")).unwrap_or_default()
    );
    report(
        1,
        "standard-caching oracle",
        mismatches.is_empty() && coalesced > 0,
        start.elapsed(),
        Duration::from_secs(10),
        &detail,
    );
}

// ---------------------------------------------------------------------------
// 2. Zero-capacity fallback

#[test]
fn criterion_02_zero_capacity_fallback() {
    let start = Instant::now();
    let mut bad = Vec::new();
    let mut compared = 0;
    let policies = [
        CutoffPolicy::SecondChance,
        CutoffPolicy::ALL_OUT,
        CutoffPolicy::PushLevel(6),
        CutoffPolicy::Linear { alpha: 0.1 },
        CutoffPolicy::Logarithmic { alpha: 0.25 },
        CutoffPolicy::LogBased { zero_intervals: 4 },
    ];
    for (n, rate) in [(64, 2.0), (256, 1.0)] {
        for seed in [3, 11] {
            let w = WorkloadConfig { n_nodes: n, query_rate: rate, rng_seed: seed, ..desk_workload() };
            let twin = run(&cfg(w.clone(), CutoffPolicy::STANDARD_CACHING), &Scenario::default()).unwrap();
            for p in policies {
                let mut c = cfg(w.clone(), p);
                c.capacity =
                    CapacityPlan { pattern: CapacityPattern::AllNodes, fraction: 0.0, ..CapacityPlan::default() };
                let out = run(&c, &Scenario::default()).unwrap();
                compared += 1;
                let a: Vec<_> = out.queries.iter().map(|q| (q.cost, q.answer.clone())).collect();
                let b: Vec<_> = twin.queries.iter().map(|q| (q.cost, q.answer.clone())).collect();
                if a != b {
                    bad.push(format!("n={n} seed={seed} {p}"));
                }
            }
        }
    }
    let detail = format!("{compared} throttled runs vs their twins, {} differ {:?}", bad.len(), bad.first());
    report(2, "zero-capacity fallback", bad.is_empty(), start.elapsed(), Duration::from_secs(30), &detail);
}

// ---------------------------------------------------------------------------
// 3. Policy ordering

#[test]
fn criterion_03_policy_ordering() {
    let start = Instant::now();
    let mut e = Experiment::new(ScenarioName::PolicyTable, false);
    e.reps = 5;
    e.rates = vec![1.0, 10.0];
    e.levels = vec![0];
    let t = table(&e);
    let mut ok = true;
    let mut parts = Vec::new();
    let mut sc_at_1 = f64::NAN;
    for rate in [1.0, 10.0] {
        let ratio = |p: CutoffPolicy| {
            point(&t, |r| r.point.rate == rate && r.point.policy.to_string() == p.to_string())
                .mean_total_ratio()
                .unwrap()
        };
        let sc = ratio(CutoffPolicy::SecondChance);
        let best_log = e
            .policies
            .iter()
            .filter(|p| matches!(p, CutoffPolicy::Logarithmic { .. }))
            .map(|&p| ratio(p))
            .fold(f64::INFINITY, f64::min);
        ok &= sc < best_log && best_log < 1.0;
        if rate == 1.0 {
            sc_at_1 = sc;
        }
        parts.push(format!("λ={rate}: second-chance {sc:.3} < best log {best_log:.3} < 1"));
    }
    ok &= (0.15..=0.45).contains(&sc_at_1);
    let detail = format!("{}; second-chance at λ=1 {sc_at_1:.3} in [0.15, 0.45]", parts.join(", "));
    report(3, "policy ordering", ok, start.elapsed(), Duration::from_secs(300), &detail);
}

// ---------------------------------------------------------------------------
// 4. Push-level shape

#[test]
fn criterion_04_push_level_shape() {
    let start = Instant::now();
    let mut e = Experiment::new(ScenarioName::PushLevelSweep, false);
    e.reps = 5;
    e.rates = vec![1.0];
    e.levels = (0..=16).step_by(2).collect();
    let t = table(&e);
    let mut monotone = true;
    for s in 0..e.reps as usize {
        let miss: Vec<u64> = t.points.iter().map(|p| p.runs[s].cup.miss_cost).collect();
        monotone &= miss.windows(2).all(|w| w[1] <= w[0]);
    }
    let totals: Vec<f64> =
        t.points.iter().map(|p| mean(&p.runs.iter().map(|r| r.cup.total_cost as f64).collect::<Vec<_>>())).collect();
    let (argmin, _) = totals.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let interior = argmin > 0 && argmin < totals.len() - 1;
    // A plateau: the last step moves total cost by at most 1% of the
    // standard-caching cost.
    let last_step = (totals[totals.len() - 1] - totals[totals.len() - 2]).abs();
    let plateau = last_step <= 0.01 * totals[0];
    let detail = format!(
        "miss cost non-increasing per seed: {monotone}; mean totals {:?}; minimum at level {}; last step {:.1}% of level 0",
        totals.iter().map(|x| x.round() as i64).collect::<Vec<_>>(),
        e.levels[argmin],
        100.0 * last_step / totals[0]
    );
    report(
        4,
        "push-level shape",
        monotone && (interior || plateau),
        start.elapsed(),
        Duration::from_secs(300),
        &detail,
    );
}

// ---------------------------------------------------------------------------
// 5. Size scaling

#[test]
fn criterion_05_size_scaling() {
    let start = Instant::now();
    let mut e = Experiment::new(ScenarioName::SizeScaling, false);
    e.reps = 3;
    e.sizes = vec![8, 32, 128, 512];
    let t = table(&e);
    let miss: Vec<f64> = t.points.iter().map(|p| p.mean_of(|r| r.miss_ratio()).unwrap()).collect();
    let saved: Vec<f64> = t.points.iter().map(|p| p.mean_of(|r| r.saved_miss_ratio()).unwrap()).collect();
    let dec = miss.windows(2).all(|w| w[1] < w[0]);
    let inc = saved.windows(2).all(|w| w[1] > w[0]);
    let last = *saved.last().unwrap();
    let detail = format!(
        "miss ratio {:?} strictly decreasing: {dec}; saved-miss ratio {:?} strictly increasing: {inc}; at 512 nodes {last:.2} > 3",
        miss.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        saved.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
    report(5, "size scaling", dec && inc && last > 3.0, start.elapsed(), Duration::from_secs(600), &detail);
}

// ---------------------------------------------------------------------------
// 6. Replica cut-off fix

#[test]
fn criterion_06_replica_cutoff() {
    let start = Instant::now();
    let mut e = Experiment::new(ScenarioName::ReplicaSweep, false);
    e.reps = 3;
    e.replica_counts = vec![1, 5, 10, 50];
    let t = table(&e);
    let misses = |mode: PopularityMode| -> Vec<f64> {
        e.replica_counts
            .iter()
            .map(|&r| {
                point(&t, |p| p.point.replicas == r && p.point.mode == mode)
                    .mean_of(|s| Some(s.cup.miss_count as f64))
                    .unwrap()
            })
            .collect()
    };
    let naive = misses(PopularityMode::Naive);
    let fixed = misses(PopularityMode::ReplicaIndependent);
    let inc = naive.windows(2).all(|w| w[1] > w[0]);
    let tail = &fixed[1..];
    let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let spread = (hi - lo) / lo;
    let detail = format!(
        "naive misses {naive:?} strictly increasing: {inc}; replica-independent {fixed:?}, spread over >=2 replicas {:.1}% < 15%",
        100.0 * spread
    );
    report(6, "replica cut-off fix", inc && spread < 0.15, start.elapsed(), Duration::from_secs(600), &detail);
}

// ---------------------------------------------------------------------------
// 7. Capacity degradation

#[test]
fn criterion_07_capacity_degradation() {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for scenario in [ScenarioName::CapacityUpDown, ScenarioName::CapacityOnceDown] {
        let mut e = Experiment::new(scenario, false);
        e.reps = 5;
        e.fractions = vec![0.0, 0.25, 0.5, 1.0];
        let t = table(&e);
        let cup = &t.points[..4];
        let totals: Vec<f64> = cup.iter().map(|p| p.mean_of(|r| Some(r.cup.total_cost as f64)).unwrap()).collect();
        let non_inc = totals.windows(2).all(|w| w[1] <= w[0]);
        let at_zero = cup[0].mean_total_ratio().unwrap();
        ok &= non_inc && at_zero < 0.75;
        parts.push(format!(
            "{scenario}: totals {:?} non-increasing {non_inc}, c=0 ratio {at_zero:.3} < 0.75",
            totals.iter().map(|x| x.round() as i64).collect::<Vec<_>>()
        ));
    }
    report(7, "capacity degradation", ok, start.elapsed(), Duration::from_secs(600), &parts.join("; "));
}

// ---------------------------------------------------------------------------
// 8. Analytic probability

#[test]
fn criterion_08_prob_justified() {
    let start = Instant::now();
    let exact = prob_justified(1.0, 6.0);
    let mut ok = (exact - 0.997521).abs() <= 1e-6;
    let mut parts = vec![format!("p(1, 6) = {exact:.6}")];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (lambda, t) in [(1.0, 6.0), (0.5, 2.0), (0.1, 3.0), (2.0, 0.25), (0.01, 50.0)] {
        let trials = 1_000_000;
        // Justified when the first arrival of the stream lands within T.
        let exp = Exp::new(lambda).unwrap();
        let hits = (0..trials).filter(|_| exp.sample(&mut rng) <= t).count();
        let mc = hits as f64 / trials as f64;
        let p = prob_justified(lambda, t);
        ok &= (mc - p).abs() < 2e-3;
        parts.push(format!("Λ={lambda} T={t}: {p:.4} vs {mc:.4}"));
    }
    report(8, "analytic probability", ok, start.elapsed(), Duration::from_secs(30), &parts.join(", "));
}

// ---------------------------------------------------------------------------
// 9. Protocol invariants under random schedules

#[derive(Debug, Clone)]
struct Schedule {
    k: u32,
    seed: u64,
    rate: f64,
    hop: f64,
    replicas: u32,
    queried: u32,
    policy: CutoffPolicy,
    mode: PopularityMode,
    capacity: CapacityPlan,
    lifetime: f64,
    zipf: bool,
    deaths: Vec<(f64, u32)>,
    appends: Vec<(f64, u32)>,
}

fn arb_policy() -> impl Strategy<Value = CutoffPolicy> {
    prop_oneof![
        (0u32..12).prop_map(CutoffPolicy::PushLevel),
        Just(CutoffPolicy::ALL_OUT),
        Just(CutoffPolicy::SecondChance),
        (0.001f64..1.0).prop_map(|alpha| CutoffPolicy::Linear { alpha }),
        (0.001f64..1.0).prop_map(|alpha| CutoffPolicy::Logarithmic { alpha }),
        (1u32..5).prop_map(|zero_intervals| CutoffPolicy::LogBased { zero_intervals }),
    ]
}

fn arb_capacity() -> impl Strategy<Value = CapacityPlan> {
    (0usize..4, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(p, fraction, affected_share)| CapacityPlan {
        pattern: [
            CapacityPattern::Full,
            CapacityPattern::UpAndDown,
            CapacityPattern::OnceDown,
            CapacityPattern::AllNodes,
        ][p],
        fraction,
        affected_share,
    })
}

fn arb_schedule() -> impl Strategy<Value = Schedule> {
    (
        (3u32..=4, any::<u64>(), 0.05f64..8.0, prop_oneof![Just(0.05), 0.01f64..3.0], 1u32..4, 1u32..4),
        (arb_policy(), any::<bool>(), arb_capacity(), prop_oneof![Just(300.0), 20.0f64..120.0], any::<bool>()),
        (prop::collection::vec((0.0f64..900.0, 0u32..3), 0..3), prop::collection::vec((0.0f64..900.0, 0u32..3), 0..3)),
    )
        .prop_map(
            |((k, seed, rate, hop, replicas, queried), (policy, ri, capacity, lifetime, zipf), (deaths, appends))| {
                Schedule {
                    k,
                    seed,
                    rate,
                    hop,
                    replicas,
                    queried,
                    policy,
                    mode: if ri { PopularityMode::ReplicaIndependent } else { PopularityMode::Naive },
                    capacity,
                    lifetime,
                    zipf,
                    deaths,
                    appends,
                }
            },
        )
}

fn run_schedule(s: &Schedule) -> Result<(), String> {
    let w = WorkloadConfig {
        n_nodes: 1 << s.k,
        query_rate: s.rate,
        per_hop_latency: s.hop,
        replicas_per_key: s.replicas,
        queried_keys: Some(s.queried),
        key_distribution: if s.zipf { KeyDistribution::Zipf(1.0) } else { KeyDistribution::Uniform },
        replica_lifetime: s.lifetime,
        warmup: s.lifetime,
        sim_duration: 1500.0,
        query_duration: 600.0,
        rng_seed: s.seed,
        ..WorkloadConfig::default()
    };
    let mut c = cfg(w, s.policy);
    c.params.mode = s.mode;
    c.capacity = s.capacity;
    c.check_invariants = true;
    let scenario = Scenario {
        deaths: s
            .deaths
            .iter()
            .map(|&(t, r)| (t, KeyId(r % s.queried), cup_core::protocol::ReplicaId(r * (1 << s.k))))
            .collect(),
        appends: s.appends.iter().map(|&(t, k)| (t, KeyId(k % s.queried))).collect(),
        ..Scenario::default()
    };
    let out = run(&c, &scenario).map_err(|e| e.to_string())?;
    if let Some(v) = out.violations.first() {
        return Err(format!("{} violations, first: {v}", out.violations.len()));
    }
    let l = &out.ledger;
    if l.total_cost() != l.miss_cost + l.update_overhead_hops + l.clearbit_overhead_hops {
        return Err("ledger identity".into());
    }
    if l.message_hops() != out.messages_sent {
        return Err(format!("ledger counts {} message hops, {} sent", l.message_hops(), out.messages_sent));
    }
    // Every clear-bit chain starts at an update arrival and climbs at most
    // the grid's diameter.
    let diameter = 1u64 << s.k;
    if l.clearbit_overhead_hops > (l.update_overhead_hops + l.miss_message_hops + 1) * diameter {
        return Err(format!("{} clear-bit hops for {} updates", l.clearbit_overhead_hops, l.update_overhead_hops));
    }
    if l.unanswered > 0 && s.deaths.is_empty() {
        return Err(format!("{} queries never answered", l.unanswered));
    }
    Ok(())
}

#[test]
fn criterion_09_protocol_invariants() {
    let start = Instant::now();
    let cases = 1000;
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let count = std::cell::Cell::new(0u32);
    let result = runner.run(&arb_schedule(), |s| {
        count.set(count.get() + 1);
        run_schedule(&s).map_err(TestCaseError::fail)
    });
    let count = count.get();
    let detail = match &result {
        Ok(()) => format!("{count} random schedules on 8- and 16-node grids, no violation"),
        Err(e) => format!("{e}"),
    };
    report(
        9,
        "protocol invariants",
        result.is_ok() && count >= cases,
        start.elapsed(),
        Duration::from_secs(300),
        &detail,
    );
}

// ---------------------------------------------------------------------------
// 10. Determinism

#[test]
fn criterion_10_determinism() {
    let start = Instant::now();
    let mut ok = true;
    let mut rows = 0;
    for scenario in ScenarioName::ALL {
        let mut e = Experiment::new(scenario, false);
        e.reps = 2;
        e.base.workload.n_nodes = 64;
        e.base.workload.query_duration = 600.0;
        e.sizes = vec![8, 64];
        e.replica_counts = vec![1, 3];
        e.levels = vec![0, 4, 8];
        e.rates = vec![1.0];
        let a = table(&e).to_csv();
        let b = table(&e).to_csv();
        rows += a.lines().count() - 1;
        ok &= a == b;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_cup-sim"))
            .args(["run", "--scenario", "policy_table", "--nodes", "64", "--rate", "1", "--seed", "7", "--reps", "2"])
            .arg("--out")
            .arg(&out)
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        ok &= status.success();
        files.push(std::fs::read(out.join("policy_table.csv")).unwrap_or_default());
    }
    ok &= !files[0].is_empty() && files[0] == files[1];
    let detail = format!("{rows} rows over six scenarios and two CLI invocations reproduced byte for byte");
    report(10, "determinism", ok, start.elapsed(), Duration::from_secs(60), &detail);
}
