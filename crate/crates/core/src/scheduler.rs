//! Outgoing update channels of a node: per-neighbor queues drained at a
//! limited rate, shares proportional to queue length, priority reordering
//! and expiry pruning.

use std::collections::{BTreeMap, VecDeque};

use crate::overlay::NodeId;
use crate::protocol::{Time, Update, UpdateKind};

/// Seconds between scheduler ticks.
pub const TICK: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Capacity {
    /// Everything enqueued goes out at once.
    #[default]
    Unlimited,
    /// Dispatch this fraction of what was enqueued, credited across ticks.
    Fraction(f64),
    /// Updates per second across all channels.
    Rate(f64),
}

impl Capacity {
    pub fn is_unlimited(&self) -> bool {
        match *self {
            Capacity::Unlimited => true,
            Capacity::Fraction(c) => c >= 1.0,
            Capacity::Rate(r) => r.is_infinite(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorityOrder {
    pub kinds: [UpdateKind; 4],
    /// Within a kind, updates closer to expiring go first.
    pub expiry_proximity_first: bool,
}

impl Default for PriorityOrder {
    fn default() -> Self {
        PriorityOrder {
            kinds: [UpdateKind::FirstTime, UpdateKind::Delete, UpdateKind::Refresh, UpdateKind::Append],
            expiry_proximity_first: false,
        }
    }
}

impl PriorityOrder {
    /// Appends first, for keys that suddenly become hot.
    pub fn flash_crowd() -> Self {
        PriorityOrder {
            kinds: [UpdateKind::Append, UpdateKind::FirstTime, UpdateKind::Delete, UpdateKind::Refresh],
            expiry_proximity_first: false,
        }
    }

    pub fn is_permutation(&self) -> bool {
        UpdateKind::ALL.iter().all(|k| self.kinds.contains(k))
    }

    fn rank(&self, kind: UpdateKind) -> usize {
        self.kinds.iter().position(|&k| k == kind).unwrap_or(self.kinds.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Queued {
    pub update: Update,
    pub enqueued_at: Time,
}

pub type UpdateQueue = VecDeque<Queued>;

/// Splits `available` dispatches over queues in proportion to their length,
/// rounding by largest remainder. Never grants more than a queue holds.
pub fn allocate(available: u64, lens: &[usize]) -> Vec<u64> {
    let total: u64 = lens.iter().map(|&l| l as u64).sum();
    let grant = available.min(total);
    if grant == 0 {
        return vec![0; lens.len()];
    }
    let mut budgets = Vec::with_capacity(lens.len());
    let mut rems = Vec::with_capacity(lens.len());
    for (i, &l) in lens.iter().enumerate() {
        let exact = grant as u128 * l as u128;
        budgets.push((exact / total as u128) as u64);
        rems.push(((exact % total as u128) as u64, i));
    }
    let mut left = grant - budgets.iter().sum::<u64>();
    // Largest remainder first, lower index on ties.
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &rems {
        if left == 0 {
            break;
        }
        if budgets[i] < lens[i] as u64 {
            budgets[i] += 1;
            left -= 1;
        }
    }
    budgets
}

/// Drops expired updates and sorts the rest stably by priority.
pub fn reorder(queue: &mut UpdateQueue, order: &PriorityOrder, now: Time) -> usize {
    let before = queue.len();
    queue.retain(|q| !q.update.is_expired(now));
    let pruned = before - queue.len();
    let v = queue.make_contiguous();
    if order.expiry_proximity_first {
        v.sort_by(|a, b| {
            order
                .rank(a.update.kind)
                .cmp(&order.rank(b.update.kind))
                .then(a.update.latest_expiry().total_cmp(&b.update.latest_expiry()))
        });
    } else {
        v.sort_by_key(|q| order.rank(q.update.kind));
    }
    pruned
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dispatch {
    pub sent: Vec<(NodeId, Update)>,
    /// Expired before they could be sent.
    pub pruned: usize,
    /// The neighbor withdrew interest while the update was queued.
    pub gated: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateChannels {
    pub queues: BTreeMap<NodeId, UpdateQueue>,
    pub credit: f64,
    pub enqueued_since_tick: u64,
}

impl UpdateChannels {
    pub fn enqueue(&mut self, to: NodeId, update: Update, now: Time) {
        self.queues.entry(to).or_default().push_back(Queued { update, enqueued_at: now });
        self.enqueued_since_tick += 1;
    }

    pub fn len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Forgets the queue of a neighbor that is gone.
    pub fn drop_neighbor(&mut self, n: NodeId) -> usize {
        self.queues.remove(&n).map_or(0, |q| q.len())
    }

    /// One scheduler tick at the given capacity. `interested` reports whether
    /// the neighbor still wants updates for the key at send time.
    pub fn tick(
        &mut self,
        capacity: Capacity,
        order: &PriorityOrder,
        now: Time,
        interested: impl FnMut(NodeId, &Update) -> bool,
    ) -> Dispatch {
        match capacity {
            Capacity::Fraction(c) => self.credit += c.max(0.0) * self.enqueued_since_tick as f64,
            Capacity::Rate(r) => self.credit += r.max(0.0) * TICK,
            Capacity::Unlimited => self.credit = f64::INFINITY,
        }
        if capacity.is_unlimited() {
            self.credit = f64::INFINITY;
        }
        self.enqueued_since_tick = 0;

        let mut pruned = 0;
        for q in self.queues.values_mut() {
            pruned += reorder(q, order, now);
        }
        let available = if self.credit.is_infinite() { u64::MAX } else { (self.credit + 1e-9).floor() as u64 };
        let lens: Vec<usize> = self.queues.values().map(VecDeque::len).collect();
        let budgets = allocate(available, &lens);
        let mut out = self.dispatch(&budgets, now, interested);
        out.pruned += pruned;
        if self.credit.is_finite() {
            self.credit = (self.credit - out.sent.len() as f64).max(0.0).min(self.len() as f64);
        } else {
            self.credit = 0.0;
        }
        self.queues.retain(|_, q| !q.is_empty());
        out
    }

    /// The earliest time a tick could change anything. Throttled queues with
    /// no credit left only move when an update expires, and an update with
    /// no entries waits for fresh credit.
    pub fn next_wake(&self, capacity: Capacity, now: Time) -> Option<Time> {
        if self.is_empty() && self.enqueued_since_tick == 0 {
            return None;
        }
        let credit_grows = match capacity {
            Capacity::Fraction(c) => c >= 1.0 || (c > 0.0 && self.enqueued_since_tick > 0),
            Capacity::Rate(r) => r > 0.0,
            Capacity::Unlimited => true,
        };
        if credit_grows || self.credit + 1e-9 >= 1.0 {
            return Some(now);
        }
        self.queues
            .values()
            .flatten()
            .filter(|q| !q.update.entries.is_empty())
            .map(|q| q.update.latest_expiry())
            .min_by(f64::total_cmp)
    }

    /// Sends up to `budgets[i]` head-of-queue updates from the i-th queue.
    pub fn dispatch(
        &mut self,
        budgets: &[u64],
        now: Time,
        mut interested: impl FnMut(NodeId, &Update) -> bool,
    ) -> Dispatch {
        let mut out = Dispatch::default();
        for ((&to, q), &budget) in self.queues.iter_mut().zip(budgets) {
            let mut sent = 0;
            while sent < budget {
                let Some(item) = q.pop_front() else { break };
                if item.update.is_expired(now) {
                    out.pruned += 1;
                } else if !interested(to, &item.update) {
                    out.gated += 1;
                } else {
                    out.sent.push((to, item.update));
                    sent += 1;
                }
            }
        }
        out
    }

    /// Sends everything still wanted, as when full capacity returns.
    pub fn flush(
        &mut self,
        order: &PriorityOrder,
        now: Time,
        interested: impl FnMut(NodeId, &Update) -> bool,
    ) -> Dispatch {
        let out = self.tick(Capacity::Unlimited, order, now, interested);
        self.credit = 0.0;
        out
    }
}
