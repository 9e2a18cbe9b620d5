//! Hop accounting and the justified-update cost model.

use serde::Serialize;

use crate::overlay::NodeId;
use crate::protocol::{KeyId, Time, UpdateKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopClass {
    /// Query messages and first-time responses.
    Miss,
    /// Proactive updates pushed down the tree.
    Update,
    ClearBit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsLedger {
    pub queries: u64,
    pub hits: u64,
    /// Sum over answered misses of twice the hops the answer travelled down
    /// to the poster. Coalesced queries pay for the path like any other.
    pub miss_cost: u64,
    /// Query and response messages actually sent. Equal to `miss_cost`
    /// when no query was ever coalesced.
    pub miss_message_hops: u64,
    pub miss_count: u64,
    pub first_time_misses: u64,
    pub freshness_misses: u64,
    pub unanswered: u64,
    pub update_overhead_hops: u64,
    pub clearbit_overhead_hops: u64,
    pub justified_updates: u64,
    pub unjustified_updates: u64,
    /// Per answered miss, time to answer divided by the per-hop latency.
    pub latency_hops: Vec<f64>,
    pub pushed_by_kind: [u64; 4],
    pub pruned_updates: u64,
    pub gated_updates: u64,
    pub dropped_messages: u64,
}

impl MetricsLedger {
    pub fn total_cost(&self) -> u64 {
        self.miss_cost + self.update_overhead_hops + self.clearbit_overhead_hops
    }

    pub fn overhead(&self) -> u64 {
        self.update_overhead_hops + self.clearbit_overhead_hops
    }

    pub fn record_hop(&mut self, class: HopClass) {
        match class {
            HopClass::Miss => self.miss_message_hops += 1,
            HopClass::Update => self.update_overhead_hops += 1,
            HopClass::ClearBit => self.clearbit_overhead_hops += 1,
        }
    }

    /// Hops of every message sent, whatever its class.
    pub fn message_hops(&self) -> u64 {
        self.miss_message_hops + self.update_overhead_hops + self.clearbit_overhead_hops
    }

    pub fn justified_fraction(&self) -> Option<f64> {
        let n = self.justified_updates + self.unjustified_updates;
        (n > 0).then(|| self.justified_updates as f64 / n as f64)
    }
}

/// The interval in which a query below the receiving node must be posted
/// for an update pushed to that node to pay for itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JustificationWindow {
    pub node: NodeId,
    pub key: KeyId,
    pub kind: UpdateKind,
    pub start: Time,
    pub end: Time,
    /// Topology generation the window was recorded under.
    pub epoch: u32,
}

impl JustificationWindow {
    pub fn is_unbounded(&self) -> bool {
        self.kind == UpdateKind::FirstTime
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostedQuery {
    pub at: Time,
    pub node: NodeId,
    pub key: KeyId,
}

/// True iff the window is unbounded or some query for its key was posted
/// inside it at a node for which `below(origin, window)` holds.
pub fn classify_justified(
    w: &JustificationWindow,
    queries_for_key: &[PostedQuery],
    mut below: impl FnMut(NodeId, &JustificationWindow) -> bool,
) -> bool {
    if w.is_unbounded() {
        return true;
    }
    let lo = queries_for_key.partition_point(|q| q.at < w.start);
    queries_for_key[lo..].iter().take_while(|q| q.at <= w.end).any(|q| below(q.node, w))
}

/// Chance that a Poisson stream of rate `lambda` produces a query within `t`.
pub fn prob_justified(lambda: f64, t: f64) -> f64 {
    -(-lambda * t).exp_m1()
}

/// Miss hops saved over standard caching per overhead hop spent. `None`
/// when the run had no overhead.
pub fn saved_miss_overhead_ratio(cup: &MetricsLedger, standard: &MetricsLedger) -> Option<f64> {
    let overhead = cup.overhead();
    (overhead > 0).then(|| (standard.miss_cost as f64 - cup.miss_cost as f64) / overhead as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub total_cost: u64,
    pub miss_cost: u64,
    pub miss_count: u64,
    pub avg_miss_latency: f64,
    /// Set when there were no misses and the latency is a placeholder.
    pub no_misses: bool,
    pub justified_fraction: Option<f64>,
    pub update_overhead: u64,
    pub clearbit_overhead: u64,
    pub queries: u64,
}

pub fn summarize(l: &MetricsLedger) -> ReportRow {
    let no_misses = l.miss_count == 0;
    ReportRow {
        total_cost: l.total_cost(),
        miss_cost: l.miss_cost,
        miss_count: l.miss_count,
        avg_miss_latency: if no_misses { 0.0 } else { l.miss_cost as f64 / l.miss_count as f64 },
        no_misses,
        justified_fraction: l.justified_fraction(),
        update_overhead: l.update_overhead_hops,
        clearbit_overhead: l.clearbit_overhead_hops,
        queries: l.queries,
    }
}
