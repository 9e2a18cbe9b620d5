//! Per-node cache state machine: query coalescing, interest registration,
//! the four update kinds and clear-bit propagation.
//!
//! Handlers are run-to-completion and never touch another node. Everything a
//! handler wants to happen elsewhere is returned as an [`Action`] for the
//! event loop to carry out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::overlay::{BitVectorPatch, NodeId};
use crate::policies::{CutoffPolicy, PolicyScratch, PopularityMode};

pub type Time = f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyId(pub u32);

impl KeyId {
    pub fn name(self) -> String {
        format!("k{}", self.0)
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReplicaId(pub u32);

impl ReplicaId {
    /// Origin marker for an update that carries no entries.
    pub const NONE: ReplicaId = ReplicaId(u32::MAX);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueryId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexEntry {
    pub key: KeyId,
    pub replica: ReplicaId,
    pub lifetime: f64,
    pub set_at: Time,
}

impl IndexEntry {
    /// Equality at the boundary counts as fresh.
    pub fn is_fresh(&self, now: Time) -> bool {
        now - self.set_at <= self.lifetime
    }

    pub fn expires_at(&self) -> Time {
        self.set_at + self.lifetime
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UpdateKind {
    FirstTime,
    Delete,
    Refresh,
    Append,
}

impl UpdateKind {
    pub const ALL: [UpdateKind; 4] =
        [UpdateKind::FirstTime, UpdateKind::Delete, UpdateKind::Refresh, UpdateKind::Append];

    pub fn as_str(self) -> &'static str {
        match self {
            UpdateKind::FirstTime => "first-time",
            UpdateKind::Delete => "delete",
            UpdateKind::Refresh => "refresh",
            UpdateKind::Append => "append",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub kind: UpdateKind,
    pub key: KeyId,
    /// For a delete, the single entry being removed.
    pub entries: Vec<IndexEntry>,
    pub origin_replica: ReplicaId,
    pub created_at: Time,
    /// Hops travelled since the entries were read from a fresh copy.
    pub hops: u32,
}

impl Update {
    pub fn first_time(key: KeyId, entries: Vec<IndexEntry>, now: Time) -> Update {
        let origin = entries.first().map_or(ReplicaId::NONE, |e| e.replica);
        Update { kind: UpdateKind::FirstTime, key, entries, origin_replica: origin, created_at: now, hops: 0 }
    }

    pub fn single(kind: UpdateKind, entry: IndexEntry, now: Time) -> Update {
        Update { kind, key: entry.key, entries: vec![entry], origin_replica: entry.replica, created_at: now, hops: 0 }
    }

    /// An empty first-time update (a key with no live replica) never expires.
    pub fn is_expired(&self, now: Time) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| !e.is_fresh(now))
    }

    pub fn latest_expiry(&self) -> Time {
        self.entries.iter().map(IndexEntry::expires_at).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MessageBody {
    Query {
        key: KeyId,
    },
    /// `response` marks a first-time update answering a neighbor's query.
    Update {
        update: Update,
        response: bool,
    },
    ClearBit {
        key: KeyId,
    },
}

impl MessageBody {
    pub fn key(&self) -> KeyId {
        match self {
            MessageBody::Query { key } | MessageBody::ClearBit { key } => *key,
            MessageBody::Update { update, .. } => update.key,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            MessageBody::Query { .. } => "query",
            MessageBody::Update { response: true, .. } => "response",
            MessageBody::Update { update, .. } => update.kind.as_str(),
            MessageBody::ClearBit { .. } => "clear-bit",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: NodeId,
    pub body: MessageBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Neighbor(NodeId),
    Local(QueryId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// One hop to a neighbor, sent immediately.
    Send { to: NodeId, body: MessageBody },
    /// A proactive update for a neighbor; goes through the node's update
    /// channel and is subject to capacity.
    Push { to: NodeId, update: Update },
    /// A local client's query is answered. `hops` is how far the answer
    /// travelled down to this node; zero for a hit.
    Answer { query: QueryId, entries: Vec<IndexEntry>, hops: u32 },
}

/// What a node needs to know about the overlay around it.
pub trait Routing {
    fn is_authority(&self, node: NodeId, key: KeyId) -> bool;
    fn next_hop(&self, node: NodeId, key: KeyId) -> NodeId;
    fn distance(&self, node: NodeId, key: KeyId) -> u32;
    /// Sorted ascending.
    fn neighbors(&self, node: NodeId) -> &[NodeId];

    fn slot_of(&self, node: NodeId, neighbor: NodeId) -> Option<usize> {
        self.neighbors(node).binary_search(&neighbor).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolParams {
    pub policy: CutoffPolicy,
    pub mode: PopularityMode,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams { policy: CutoffPolicy::SecondChance, mode: PopularityMode::Naive }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyState {
    pub entries: BTreeMap<ReplicaId, IndexEntry>,
    pub pending: bool,
    pub pending_upstream: Option<NodeId>,
    pub interest: Vec<bool>,
    /// Neighbors whose query is waiting on our pending one.
    pub awaiting: BTreeSet<NodeId>,
    pub local_waiters: Vec<QueryId>,
    pub scratch: PolicyScratch,
    pub trigger_replica: Option<ReplicaId>,
    pub subscribed: bool,
    pub distance: u32,
    pub per_replica_last_update: BTreeMap<ReplicaId, Time>,
}

impl KeyState {
    pub fn new(neighbor_count: usize, distance: u32) -> KeyState {
        KeyState {
            entries: BTreeMap::new(),
            pending: false,
            pending_upstream: None,
            interest: vec![false; neighbor_count],
            awaiting: BTreeSet::new(),
            local_waiters: Vec::new(),
            scratch: PolicyScratch::default(),
            trigger_replica: None,
            subscribed: false,
            distance,
            per_replica_last_update: BTreeMap::new(),
        }
    }

    pub fn has_fresh(&self, now: Time) -> bool {
        self.entries.values().any(|e| e.is_fresh(now))
    }

    pub fn fresh_entries(&self, now: Time) -> Vec<IndexEntry> {
        self.entries.values().filter(|e| e.is_fresh(now)).copied().collect()
    }

    pub fn no_interest(&self) -> bool {
        !self.interest.iter().any(|&b| b)
    }

    /// Whether this arrival is a decision point for the cut-off policy.
    pub fn popularity_tick(&mut self, mode: PopularityMode, origin: ReplicaId) -> bool {
        match mode {
            PopularityMode::Naive => true,
            PopularityMode::ReplicaIndependent => match self.trigger_replica {
                None => {
                    self.trigger_replica = Some(origin);
                    true
                }
                Some(t) => t == origin,
            },
        }
    }

    /// Applies a non-expired update to the cached entry set.
    pub fn apply_update(&mut self, update: &Update, now: Time) {
        let fresh = update.entries.iter().filter(|e| e.is_fresh(now));
        match update.kind {
            UpdateKind::FirstTime => {
                self.entries = fresh.map(|e| (e.replica, *e)).collect();
            }
            UpdateKind::Refresh | UpdateKind::Append => {
                for e in fresh {
                    self.entries.insert(e.replica, *e);
                }
            }
            UpdateKind::Delete => {
                for e in &update.entries {
                    self.entries.remove(&e.replica);
                    if self.trigger_replica == Some(e.replica) {
                        self.trigger_replica = None;
                    }
                }
            }
        }
        if update.kind != UpdateKind::Delete {
            for e in &update.entries {
                self.per_replica_last_update.insert(e.replica, now);
            }
        }
        if self.trigger_replica.is_none() {
            self.trigger_replica = self.entries.keys().next().copied();
        }
    }
}

/// Entries a node owns as the authority, with the interest of its neighbors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DirectoryRecord {
    pub entries: BTreeMap<ReplicaId, IndexEntry>,
    pub interest: Vec<bool>,
}

impl DirectoryRecord {
    pub fn new(neighbor_count: usize) -> DirectoryRecord {
        DirectoryRecord { entries: BTreeMap::new(), interest: vec![false; neighbor_count] }
    }

    pub fn fresh_entries(&self, now: Time) -> Vec<IndexEntry> {
        self.entries.values().filter(|e| e.is_fresh(now)).copied().collect()
    }
}

/// Node-independent form of a key's state, used to move state between nodes
/// on membership changes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PortableKey {
    pub entries: BTreeMap<ReplicaId, IndexEntry>,
    pub interested: BTreeSet<NodeId>,
    pub awaiting: BTreeSet<NodeId>,
    pub local_waiters: Vec<QueryId>,
    pub pending: bool,
    pub scratch: PolicyScratch,
}

impl PortableKey {
    /// Union of entry sets keeping the most recently set copy of each replica.
    pub fn merge_entries(into: &mut BTreeMap<ReplicaId, IndexEntry>, from: &BTreeMap<ReplicaId, IndexEntry>) {
        for (r, e) in from {
            match into.get(r) {
                Some(old) if old.set_at >= e.set_at => {}
                _ => {
                    into.insert(*r, *e);
                }
            }
        }
    }
}

fn bits_to_ids(bits: &[bool], nbrs: &[NodeId]) -> BTreeSet<NodeId> {
    bits.iter().zip(nbrs).filter(|(b, _)| **b).map(|(_, n)| *n).collect()
}

fn ids_to_bits(ids: &BTreeSet<NodeId>, nbrs: &[NodeId]) -> Vec<bool> {
    nbrs.iter().map(|n| ids.contains(n)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub id: NodeId,
    pub directory: BTreeMap<KeyId, DirectoryRecord>,
    pub cache: BTreeMap<KeyId, KeyState>,
}

impl NodeState {
    pub fn new(id: NodeId) -> NodeState {
        NodeState { id, directory: BTreeMap::new(), cache: BTreeMap::new() }
    }

    fn directory_record<'a, R: Routing>(&'a mut self, key: KeyId, routing: &R) -> &'a mut DirectoryRecord {
        let n = routing.neighbors(self.id).len();
        self.directory.entry(key).or_insert_with(|| DirectoryRecord::new(n))
    }

    pub fn is_interested<R: Routing>(&self, key: KeyId, neighbor: NodeId, routing: &R) -> bool {
        let Some(slot) = routing.slot_of(self.id, neighbor) else { return false };
        let bits = if routing.is_authority(self.id, key) {
            self.directory.get(&key).map(|r| &r.interest)
        } else {
            self.cache.get(&key).map(|s| &s.interest)
        };
        bits.and_then(|b| b.get(slot).copied()).unwrap_or(false)
    }

    pub fn handle_query<R: Routing>(
        &mut self,
        key: KeyId,
        source: Source,
        now: Time,
        routing: &R,
        out: &mut Vec<Action>,
    ) {
        let me = self.id;
        let slot = match source {
            Source::Neighbor(from) => match routing.slot_of(me, from) {
                Some(s) => Some(s),
                None => return,
            },
            Source::Local(_) => None,
        };

        if routing.is_authority(me, key) {
            let rec = self.directory_record(key, routing);
            let entries = rec.fresh_entries(now);
            match source {
                Source::Neighbor(from) => {
                    rec.interest[slot.unwrap()] = true;
                    let update = Update::first_time(key, entries, now);
                    out.push(Action::Send { to: from, body: MessageBody::Update { update, response: true } });
                }
                Source::Local(q) => out.push(Action::Answer { query: q, entries, hops: 0 }),
            }
            return;
        }

        let nbrs = routing.neighbors(me).len();
        let st = self.cache.entry(key).or_insert_with(|| KeyState::new(nbrs, routing.distance(me, key)));
        st.scratch.on_query();
        if let Some(s) = slot {
            st.interest[s] = true;
        }
        if st.has_fresh(now) {
            let entries = st.fresh_entries(now);
            match source {
                Source::Neighbor(from) => {
                    let update = Update::first_time(key, entries, now);
                    out.push(Action::Send { to: from, body: MessageBody::Update { update, response: true } });
                }
                Source::Local(q) => out.push(Action::Answer { query: q, entries, hops: 0 }),
            }
            return;
        }
        match source {
            Source::Neighbor(from) => {
                st.awaiting.insert(from);
            }
            Source::Local(q) => st.local_waiters.push(q),
        }
        if !st.pending {
            Self::forward_query(me, key, st, routing, out);
        }
    }

    fn forward_query<R: Routing>(me: NodeId, key: KeyId, st: &mut KeyState, routing: &R, out: &mut Vec<Action>) {
        let next = routing.next_hop(me, key);
        st.pending = true;
        st.pending_upstream = Some(next);
        st.subscribed = true;
        out.push(Action::Send { to: next, body: MessageBody::Query { key } });
    }

    fn push_to_interested(
        me: NodeId,
        st: &KeyState,
        update: &Update,
        skip: impl Fn(NodeId) -> bool,
        params: &ProtocolParams,
        nbrs: &[NodeId],
        out: &mut Vec<Action>,
    ) {
        if !params.policy.allows_push_to(st.distance.saturating_add(1)) {
            return;
        }
        for (slot, &bit) in st.interest.iter().enumerate() {
            let to = nbrs[slot];
            if bit && to != me && !skip(to) {
                out.push(Action::Push { to, update: update.clone() });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn handle_update<R: Routing>(
        &mut self,
        from: NodeId,
        update: Update,
        now: Time,
        params: &ProtocolParams,
        routing: &R,
        out: &mut Vec<Action>,
    ) {
        let me = self.id;
        let key = update.key;
        if routing.is_authority(me, key) || routing.slot_of(me, from).is_none() {
            return;
        }
        let nbrs = routing.neighbors(me);
        let Some(st) = self.cache.get_mut(&key) else {
            out.push(Action::Send { to: from, body: MessageBody::ClearBit { key } });
            return;
        };

        if update.is_expired(now) {
            // The answer to our query went stale in transit; ask again or the
            // waiters would hang.
            if st.pending && update.kind == UpdateKind::FirstTime {
                Self::forward_query(me, key, st, routing, out);
            }
            return;
        }

        if st.pending && update.kind == UpdateKind::FirstTime {
            st.apply_update(&update, now);
            st.pending = false;
            st.pending_upstream = None;
            st.subscribed = true;
            let fresh = st.fresh_entries(now);
            let awaiting = std::mem::take(&mut st.awaiting);
            let hops = update.hops;
            for &to in &awaiting {
                let update = Update { hops, ..Update::first_time(key, fresh.clone(), now) };
                out.push(Action::Send { to, body: MessageBody::Update { update, response: true } });
            }
            let push = Update { hops, ..Update::first_time(key, fresh.clone(), now) };
            Self::push_to_interested(me, st, &push, |n| n == from || awaiting.contains(&n), params, nbrs, out);
            for q in st.local_waiters.drain(..) {
                out.push(Action::Answer { query: q, entries: fresh.clone(), hops });
            }
            return;
        }

        if st.popularity_tick(params.mode, update.origin_replica) {
            if st.no_interest() && !st.pending {
                if !st.scratch.evaluate(&params.policy, st.distance) {
                    st.subscribed = false;
                    out.push(Action::Send { to: from, body: MessageBody::ClearBit { key } });
                    return;
                }
            } else {
                st.scratch.on_trigger_update();
            }
        }
        st.apply_update(&update, now);
        st.subscribed = true;
        Self::push_to_interested(me, st, &update, |n| n == from, params, nbrs, out);
    }

    pub fn handle_clear_bit<R: Routing>(
        &mut self,
        key: KeyId,
        from: NodeId,
        params: &ProtocolParams,
        routing: &R,
        out: &mut Vec<Action>,
    ) {
        let me = self.id;
        let Some(slot) = routing.slot_of(me, from) else { return };
        if routing.is_authority(me, key) {
            if let Some(rec) = self.directory.get_mut(&key) {
                rec.interest[slot] = false;
            }
            return;
        }
        let Some(st) = self.cache.get_mut(&key) else { return };
        st.interest[slot] = false;
        if st.no_interest() && st.subscribed && !st.pending && !st.scratch.peek(&params.policy, st.distance) {
            st.subscribed = false;
            out.push(Action::Send { to: routing.next_hop(me, key), body: MessageBody::ClearBit { key } });
        }
    }

    fn push_from_directory<R: Routing>(
        &self,
        key: KeyId,
        update: &Update,
        params: &ProtocolParams,
        routing: &R,
        out: &mut Vec<Action>,
    ) {
        if !params.policy.allows_push_to(1) {
            return;
        }
        let Some(rec) = self.directory.get(&key) else { return };
        for (slot, &bit) in rec.interest.iter().enumerate() {
            if bit {
                out.push(Action::Push { to: routing.neighbors(self.id)[slot], update: update.clone() });
            }
        }
    }

    /// A replica registers or renews its entry at this node, the authority.
    #[allow(clippy::too_many_arguments)]
    pub fn replica_refresh<R: Routing>(
        &mut self,
        key: KeyId,
        replica: ReplicaId,
        lifetime: f64,
        now: Time,
        params: &ProtocolParams,
        routing: &R,
        out: &mut Vec<Action>,
    ) {
        let entry = IndexEntry { key, replica, lifetime, set_at: now };
        let rec = self.directory_record(key, routing);
        let kind = match rec.entries.insert(replica, entry) {
            Some(_) => UpdateKind::Refresh,
            None => UpdateKind::Append,
        };
        let update = Update::single(kind, entry, now);
        self.push_from_directory(key, &update, params, routing, out);
    }

    /// A replica withdraws its entry at this node, the authority.
    pub fn replica_death<R: Routing>(
        &mut self,
        key: KeyId,
        replica: ReplicaId,
        now: Time,
        params: &ProtocolParams,
        routing: &R,
        out: &mut Vec<Action>,
    ) {
        let Some(entry) = self.directory.get_mut(&key).and_then(|r| r.entries.remove(&replica)) else { return };
        let update = Update::single(UpdateKind::Delete, entry, now);
        self.push_from_directory(key, &update, params, routing, out);
    }

    /// Rebuilds every interest vector after the neighbor list changed.
    pub fn apply_patch(&mut self, patch: &BitVectorPatch) {
        debug_assert_eq!(patch.node, self.id);
        for rec in self.directory.values_mut() {
            rec.interest = patch.apply(&rec.interest);
        }
        for st in self.cache.values_mut() {
            st.interest = patch.apply(&st.interest);
        }
    }

    /// Detaches the directory records selected by `pred`, expressed over
    /// neighbor ids so they can be installed on another node.
    pub fn export_directory<R: Routing>(
        &mut self,
        routing: &R,
        mut pred: impl FnMut(KeyId) -> bool,
    ) -> Vec<(KeyId, PortableKey)> {
        let nbrs = routing.neighbors(self.id).to_vec();
        let keys: Vec<KeyId> = self.directory.keys().copied().filter(|&k| pred(k)).collect();
        keys.into_iter()
            .map(|k| {
                let rec = self.directory.remove(&k).unwrap();
                let p = PortableKey {
                    entries: rec.entries,
                    interested: bits_to_ids(&rec.interest, &nbrs),
                    ..Default::default()
                };
                (k, p)
            })
            .collect()
    }

    pub fn export_cache<R: Routing>(&mut self, routing: &R) -> Vec<(KeyId, PortableKey)> {
        let nbrs = routing.neighbors(self.id).to_vec();
        std::mem::take(&mut self.cache)
            .into_iter()
            .map(|(k, st)| {
                let p = PortableKey {
                    entries: st.entries,
                    interested: bits_to_ids(&st.interest, &nbrs),
                    awaiting: st.awaiting,
                    local_waiters: st.local_waiters,
                    pending: st.pending,
                    scratch: st.scratch,
                };
                (k, p)
            })
            .collect()
    }

    /// Installs state for `key` moved from another node. If this node is the
    /// key's authority the entries join the directory and anyone waiting is
    /// answered; otherwise the state merges into the cache.
    pub fn import_key<R: Routing>(
        &mut self,
        key: KeyId,
        mut moved: PortableKey,
        now: Time,
        routing: &R,
        out: &mut Vec<Action>,
    ) {
        let me = self.id;
        let nbrs = routing.neighbors(me).to_vec();
        moved.interested.remove(&me);
        moved.awaiting.remove(&me);
        if routing.is_authority(me, key) {
            if let Some(st) = self.cache.remove(&key) {
                PortableKey::merge_entries(&mut moved.entries, &st.entries);
                moved.interested.extend(bits_to_ids(&st.interest, &nbrs));
                moved.awaiting.extend(st.awaiting);
                moved.local_waiters.extend(st.local_waiters);
            }
            let rec = self.directory_record(key, routing);
            PortableKey::merge_entries(&mut rec.entries, &moved.entries);
            for (b, new) in rec.interest.iter_mut().zip(ids_to_bits(&moved.interested, &nbrs)) {
                *b |= new;
            }
            let fresh = rec.fresh_entries(now);
            for to in moved.awaiting {
                if nbrs.binary_search(&to).is_ok() {
                    let update = Update::first_time(key, fresh.clone(), now);
                    out.push(Action::Send { to, body: MessageBody::Update { update, response: true } });
                }
            }
            for q in moved.local_waiters {
                out.push(Action::Answer { query: q, entries: fresh.clone(), hops: 0 });
            }
            return;
        }
        let st = self.cache.entry(key).or_insert_with(|| KeyState::new(nbrs.len(), routing.distance(me, key)));
        PortableKey::merge_entries(&mut st.entries, &moved.entries);
        for (b, new) in st.interest.iter_mut().zip(ids_to_bits(&moved.interested, &nbrs)) {
            *b |= new;
        }
        st.awaiting.extend(moved.awaiting);
        st.local_waiters.extend(moved.local_waiters);
        st.scratch.popularity = st.scratch.popularity.max(moved.scratch.popularity);
        if moved.pending && !st.pending {
            // Picked up by `refresh_after_membership`.
            st.pending = true;
            st.pending_upstream = None;
        }
        if st.trigger_replica.is_none() {
            st.trigger_replica = st.entries.keys().next().copied();
        }
    }

    /// Makes this node a subscriber of `key` at a neighbor that just took
    /// over the key, keeping `entries` cached for the neighbors in `serve`.
    pub fn keep_as_cache<R: Routing>(
        &mut self,
        key: KeyId,
        moved: &PortableKey,
        serve: &BTreeSet<NodeId>,
        routing: &R,
    ) {
        let me = self.id;
        let nbrs = routing.neighbors(me);
        let mut st = KeyState::new(nbrs.len(), routing.distance(me, key));
        st.entries = moved.entries.clone();
        st.interest = ids_to_bits(serve, nbrs);
        st.subscribed = true;
        st.trigger_replica = st.entries.keys().next().copied();
        self.cache.insert(key, st);
    }

    pub fn set_directory_interest<R: Routing>(&mut self, key: KeyId, interested: &BTreeSet<NodeId>, routing: &R) {
        let nbrs = routing.neighbors(self.id).to_vec();
        let rec = self.directory_record(key, routing);
        rec.interest = ids_to_bits(interested, &nbrs);
    }

    pub fn install_directory_entries<R: Routing>(
        &mut self,
        key: KeyId,
        entries: &BTreeMap<ReplicaId, IndexEntry>,
        routing: &R,
    ) {
        let rec = self.directory_record(key, routing);
        PortableKey::merge_entries(&mut rec.entries, entries);
    }

    /// Recomputes distances, forgets waiting neighbors that are gone and
    /// re-issues queries whose upstream hop is no longer a neighbor.
    pub fn refresh_after_membership<R: Routing>(&mut self, now: Time, routing: &R, out: &mut Vec<Action>) {
        let me = self.id;
        let nbrs = routing.neighbors(me).to_vec();
        let owned: Vec<KeyId> = self.cache.keys().copied().filter(|&k| routing.is_authority(me, k)).collect();
        for key in owned {
            let st = self.cache.remove(&key).unwrap();
            let moved = PortableKey {
                entries: st.entries,
                interested: bits_to_ids(&st.interest, &nbrs),
                awaiting: st.awaiting,
                local_waiters: st.local_waiters,
                pending: false,
                scratch: st.scratch,
            };
            self.import_key(key, moved, now, routing, out);
        }
        for (&key, st) in self.cache.iter_mut() {
            st.distance = routing.distance(me, key);
            st.awaiting.retain(|n| nbrs.binary_search(n).is_ok());
            if st.pending {
                let stale = st.pending_upstream.is_none_or(|u| nbrs.binary_search(&u).is_err());
                if stale {
                    Self::forward_query(me, key, st, routing, out);
                }
            }
        }
        for rec in self.directory.values_mut() {
            rec.interest.resize(nbrs.len(), false);
        }
    }

    /// Drains every waiter; used when a node departs without handing over.
    pub fn abandoned_queries(&self) -> Vec<QueryId> {
        self.cache.values().flat_map(|s| s.local_waiters.iter().copied()).collect()
    }
}
