//! Two-dimensional coordinate-space overlay in the style of a bare-bones
//! content-addressable network: equal-area grid construction, key placement,
//! greedy hop-by-hop routing, and zone split/merge on membership changes.

use std::fmt;

use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64;

/// Smallest zone side we are willing to create by splitting.
const MIN_SIDE: f64 = 1.0 / (1u64 << 24) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// A point of the unit square `[0,1)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn dist2(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Axis-aligned rectangle with half-open bounds `[lo, hi)` on both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Zone {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl Zone {
    pub fn new(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> Self {
        debug_assert!(x_lo < x_hi && y_lo < y_hi);
        Zone { x_lo, x_hi, y_lo, y_hi }
    }

    pub fn unit() -> Self {
        Zone::new(0.0, 1.0, 0.0, 1.0)
    }

    pub fn width(&self) -> f64 {
        self.x_hi - self.x_lo
    }

    pub fn height(&self) -> f64 {
        self.y_hi - self.y_lo
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new((self.x_lo + self.x_hi) / 2.0, (self.y_lo + self.y_hi) / 2.0)
    }

    pub fn aspect_ratio(&self) -> f64 {
        let (w, h) = (self.width(), self.height());
        w.max(h) / w.min(h)
    }

    pub fn contains(&self, p: Point) -> bool {
        self.x_lo <= p.x && p.x < self.x_hi && self.y_lo <= p.y && p.y < self.y_hi
    }

    /// Squared distance from `p` to the closed rectangle.
    fn rect_dist2(&self, p: Point) -> f64 {
        let dx = if p.x < self.x_lo {
            self.x_lo - p.x
        } else if p.x > self.x_hi {
            p.x - self.x_hi
        } else {
            0.0
        };
        let dy = if p.y < self.y_lo {
            self.y_lo - p.y
        } else if p.y > self.y_hi {
            p.y - self.y_hi
        } else {
            0.0
        };
        dx * dx + dy * dy
    }

    /// True if the two zones share a border segment of positive length.
    pub fn borders(&self, other: &Zone) -> bool {
        let x_touch = self.x_hi == other.x_lo || other.x_hi == self.x_lo;
        let y_touch = self.y_hi == other.y_lo || other.y_hi == self.y_lo;
        let x_overlap = self.x_hi.min(other.x_hi) - self.x_lo.max(other.x_lo);
        let y_overlap = self.y_hi.min(other.y_hi) - self.y_lo.max(other.y_lo);
        (x_touch && y_overlap > 0.0) || (y_touch && x_overlap > 0.0)
    }

    pub fn overlaps(&self, other: &Zone) -> bool {
        let x_overlap = self.x_hi.min(other.x_hi) - self.x_lo.max(other.x_lo);
        let y_overlap = self.y_hi.min(other.y_hi) - self.y_lo.max(other.y_lo);
        x_overlap > 0.0 && y_overlap > 0.0
    }

    /// Union of two zones if it is itself a rectangle.
    pub fn merge(&self, other: &Zone) -> Option<Zone> {
        let same_rows = self.y_lo == other.y_lo && self.y_hi == other.y_hi;
        let same_cols = self.x_lo == other.x_lo && self.x_hi == other.x_hi;
        if same_rows && (self.x_hi == other.x_lo || other.x_hi == self.x_lo) {
            Some(Zone::new(self.x_lo.min(other.x_lo), self.x_hi.max(other.x_hi), self.y_lo, self.y_hi))
        } else if same_cols && (self.y_hi == other.y_lo || other.y_hi == self.y_lo) {
            Some(Zone::new(self.x_lo, self.x_hi, self.y_lo.min(other.y_lo), self.y_hi.max(other.y_hi)))
        } else {
            None
        }
    }

    /// Halves the zone along its longer side (x on ties). Returns
    /// `(kept, given)`, where `given` is the half with higher coordinates.
    pub fn split(&self) -> (Zone, Zone) {
        if self.width() >= self.height() {
            let mid = (self.x_lo + self.x_hi) / 2.0;
            (Zone::new(self.x_lo, mid, self.y_lo, self.y_hi), Zone::new(mid, self.x_hi, self.y_lo, self.y_hi))
        } else {
            let mid = (self.y_lo + self.y_hi) / 2.0;
            (Zone::new(self.x_lo, self.x_hi, self.y_lo, mid), Zone::new(self.x_lo, self.x_hi, mid, self.y_hi))
        }
    }
}

/// Maps a key name to its point in the coordinate space: the high 32 bits of
/// a 64-bit xxh3 hash give the x fraction, the low 32 bits the y fraction.
pub fn hash_key(key: &str) -> Point {
    let h = xxh3_64(key.as_bytes());
    let scale = (1u64 << 32) as f64;
    Point::new((h >> 32) as f64 / scale, (h & 0xffff_ffff) as f64 / scale)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OverlayError {
    #[error("node count {0} is not a power of two in [8, 4096]")]
    BadNodeCount(usize),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node id {0} is already in use")]
    IdInUse(NodeId),
    #[error("splitting {node} would create a zone with aspect ratio above 2 or below grid granularity")]
    BadSplit { node: NodeId },
    #[error("no neighbor of {0} can merge with its zone into a rectangle")]
    NoMergeableNeighbor(NodeId),
    #[error("cannot remove the last node")]
    LastNode,
}

/// How a single node's per-key interest bit vector is rebuilt after a
/// membership change. Slot `i` of the new vector corresponds to the `i`-th
/// entry of the node's new neighbor list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotSource {
    /// New neighbor with no prior interest.
    Fresh,
    /// Bit copied from this slot of the old vector.
    From(usize),
    /// OR of two old slots (a neighbor absorbing another one).
    Union(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitVectorPatch {
    pub node: NodeId,
    pub slots: Vec<SlotSource>,
}

impl BitVectorPatch {
    /// Rebuilds a bit vector laid out over the old neighbor list.
    pub fn apply(&self, old: &[bool]) -> Vec<bool> {
        let get = |i: usize| old.get(i).copied().unwrap_or(false);
        self.slots
            .iter()
            .map(|s| match *s {
                SlotSource::Fresh => false,
                SlotSource::From(i) => get(i),
                SlotSource::Union(i, j) => get(i) || get(j),
            })
            .collect()
    }
}

/// Result of a join: the id of the new node and the patches every affected
/// node must apply to its interest bit vectors.
#[derive(Debug, Clone)]
pub struct JoinOutcome {
    pub new_node: NodeId,
    pub splitting: NodeId,
    pub patches: Vec<BitVectorPatch>,
}

#[derive(Debug, Clone)]
pub struct LeaveOutcome {
    pub leaving: NodeId,
    pub absorber: NodeId,
    pub patches: Vec<BitVectorPatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandoverPolicy {
    /// Hand nothing over; dependents' entries expire downstream.
    None,
    /// Copy stored entries together with their interest bits.
    Copy,
}

#[derive(Debug, Clone)]
pub struct Topology {
    zones: Vec<Option<Zone>>,
    neighbors: Vec<Vec<NodeId>>,
    live: usize,
    grid: Option<(u32, u32)>,
}

impl Topology {
    /// Equal-area grid of `n = 2^k` zones, `2^⌈k/2⌉` columns by `2^⌊k/2⌋`
    /// rows, without wraparound. Node ids are assigned row-major.
    pub fn grid(n: usize) -> Result<Topology, OverlayError> {
        if !n.is_power_of_two() || !(8..=4096).contains(&n) {
            return Err(OverlayError::BadNodeCount(n));
        }
        let k = n.trailing_zeros();
        let cols = 1u32 << k.div_ceil(2);
        let rows = 1u32 << (k / 2);
        let mut zones = Vec::with_capacity(n);
        let mut neighbors = Vec::with_capacity(n);
        for row in 0..rows {
            for col in 0..cols {
                let (c, r) = (col as f64, row as f64);
                let (cw, rh) = (cols as f64, rows as f64);
                zones.push(Some(Zone::new(c / cw, (c + 1.0) / cw, r / rh, (r + 1.0) / rh)));
                let mut nb = Vec::with_capacity(4);
                if row > 0 {
                    nb.push(NodeId((row - 1) * cols + col));
                }
                if col > 0 {
                    nb.push(NodeId(row * cols + col - 1));
                }
                if col + 1 < cols {
                    nb.push(NodeId(row * cols + col + 1));
                }
                if row + 1 < rows {
                    nb.push(NodeId((row + 1) * cols + col));
                }
                neighbors.push(nb);
            }
        }
        Ok(Topology { zones, neighbors, live: n, grid: Some((cols, rows)) })
    }

    /// `(columns, rows)` while the topology is still the untouched grid.
    pub fn grid_shape(&self) -> Option<(u32, u32)> {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn contains_node(&self, id: NodeId) -> bool {
        self.zones.get(id.index()).is_some_and(|z| z.is_some())
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.zones.iter().enumerate().filter(|(_, z)| z.is_some()).map(|(i, _)| NodeId(i as u32))
    }

    /// One past the highest id ever allocated.
    pub fn id_bound(&self) -> usize {
        self.zones.len()
    }

    pub fn next_free_id(&self) -> NodeId {
        NodeId(self.zones.len() as u32)
    }

    pub fn zone_of(&self, id: NodeId) -> Option<&Zone> {
        self.zones.get(id.index()).and_then(|z| z.as_ref())
    }

    fn zone(&self, id: NodeId) -> &Zone {
        self.zone_of(id).expect("live node")
    }

    /// Neighbors ordered by ascending id; this order defines bit-vector slots.
    pub fn neighbors_of(&self, id: NodeId) -> &[NodeId] {
        self.neighbors.get(id.index()).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn slot_of(&self, at: NodeId, neighbor: NodeId) -> Option<usize> {
        self.neighbors_of(at).binary_search(&neighbor).ok()
    }

    /// The unique node whose zone contains `p`.
    pub fn owner_of(&self, p: Point) -> NodeId {
        if let Some((cols, rows)) = self.grid {
            let col = ((p.x * cols as f64) as u32).min(cols - 1);
            let row = ((p.y * rows as f64) as u32).min(rows - 1);
            return NodeId(row * cols + col);
        }
        self.nodes().find(|&n| self.zone(n).contains(p)).expect("zones tile the unit square")
    }

    pub fn authority_of(&self, key: &str) -> NodeId {
        self.owner_of(hash_key(key))
    }

    /// Next hop from `at` toward `target`. A neighbor containing the target
    /// wins outright; otherwise the neighbor whose zone is nearest to the
    /// target, then whose center is nearest, then the lowest id.
    pub fn route_next_hop(&self, at: NodeId, target: Point) -> NodeId {
        let nbrs = self.neighbors_of(at);
        if let Some(&n) = nbrs.iter().find(|&&n| self.zone(n).contains(target)) {
            return n;
        }
        *nbrs
            .iter()
            .min_by(|&&a, &&b| {
                let (za, zb) = (self.zone(a), self.zone(b));
                za.rect_dist2(target)
                    .total_cmp(&zb.rect_dist2(target))
                    .then(za.center().dist2(target).total_cmp(&zb.center().dist2(target)))
                    .then(a.cmp(&b))
            })
            .expect("connected overlay with at least two nodes")
    }

    /// Node sequence from `from` to the owner of `target`, inclusive.
    pub fn path_to(&self, from: NodeId, target: Point) -> Vec<NodeId> {
        let mut path = vec![from];
        let mut at = from;
        while !self.zone(at).contains(target) {
            at = self.route_next_hop(at, target);
            path.push(at);
            assert!(path.len() <= self.zones.len() + 1, "routing loop toward {target:?}");
        }
        path
    }

    pub fn query_path(&self, from: NodeId, key: &str) -> Vec<NodeId> {
        self.path_to(from, hash_key(key))
    }

    /// Hop count from `from` to the owner of `target`.
    pub fn distance_to(&self, from: NodeId, target: Point) -> u32 {
        let mut at = from;
        let mut hops = 0;
        while !self.zone(at).contains(target) {
            at = self.route_next_hop(at, target);
            hops += 1;
        }
        hops
    }

    /// Splits `splitting`'s zone along its longer side; `new_id` takes the
    /// upper half.
    pub fn join(&mut self, splitting: NodeId, new_id: NodeId) -> Result<JoinOutcome, OverlayError> {
        let zone = *self.zone_of(splitting).ok_or(OverlayError::UnknownNode(splitting))?;
        if self.contains_node(new_id) {
            return Err(OverlayError::IdInUse(new_id));
        }
        if zone.aspect_ratio() > 4.0 || zone.width().max(zone.height()) / 2.0 < MIN_SIDE {
            return Err(OverlayError::BadSplit { node: splitting });
        }
        let (kept, given) = zone.split();

        let old_lists: Vec<(NodeId, Vec<NodeId>)> = std::iter::once(splitting)
            .chain(self.neighbors_of(splitting).iter().copied())
            .map(|n| (n, self.neighbors_of(n).to_vec()))
            .collect();
        let candidates: Vec<NodeId> = self.neighbors_of(splitting).to_vec();

        if new_id.index() >= self.zones.len() {
            self.zones.resize(new_id.index() + 1, None);
            self.neighbors.resize(new_id.index() + 1, Vec::new());
        }
        self.zones[splitting.index()] = Some(kept);
        self.zones[new_id.index()] = Some(given);
        self.live += 1;
        self.grid = None;

        let mut new_nbrs: Vec<NodeId> = candidates.iter().copied().filter(|&c| self.zone(c).borders(&given)).collect();
        new_nbrs.push(splitting);
        new_nbrs.sort();
        self.neighbors[new_id.index()] = new_nbrs;

        let mut split_nbrs: Vec<NodeId> = candidates.iter().copied().filter(|&c| self.zone(c).borders(&kept)).collect();
        split_nbrs.push(new_id);
        split_nbrs.sort();
        self.neighbors[splitting.index()] = split_nbrs;

        for &c in &candidates {
            let list = &mut self.neighbors[c.index()];
            list.retain(|&x| x != splitting);
            if self.zones[splitting.index()].as_ref().unwrap().borders(self.zones[c.index()].as_ref().unwrap()) {
                list.push(splitting);
            }
            if given.borders(self.zones[c.index()].as_ref().unwrap()) {
                list.push(new_id);
            }
            list.sort();
        }

        let mut patches = Vec::with_capacity(old_lists.len() + 1);
        for (node, old) in &old_lists {
            let rename = |gone: NodeId| if gone == splitting { Some(new_id) } else { None };
            patches.push(build_patch(*node, old, self.neighbors_of(*node), rename));
        }
        patches.push(BitVectorPatch { node: new_id, slots: vec![SlotSource::Fresh; self.neighbors_of(new_id).len()] });
        Ok(JoinOutcome { new_node: new_id, splitting, patches })
    }

    /// Neighbors of `leaving` whose zone merges with it into a rectangle.
    pub fn merge_candidates(&self, leaving: NodeId) -> Vec<NodeId> {
        let Some(zone) = self.zone_of(leaving) else { return Vec::new() };
        self.neighbors_of(leaving).iter().copied().filter(|&n| self.zone(n).merge(zone).is_some()).collect()
    }

    /// Removes `leaving`; the mergeable neighbor with the lowest id absorbs
    /// its zone. With `transfer`, interest bits that pointed at the departing
    /// node are redirected to the absorber; otherwise they are dropped.
    pub fn leave(&mut self, leaving: NodeId, transfer: bool) -> Result<LeaveOutcome, OverlayError> {
        let zone = *self.zone_of(leaving).ok_or(OverlayError::UnknownNode(leaving))?;
        if self.live <= 1 {
            return Err(OverlayError::LastNode);
        }
        let absorber = *self.merge_candidates(leaving).first().ok_or(OverlayError::NoMergeableNeighbor(leaving))?;
        let merged = self.zone(absorber).merge(&zone).expect("candidate merges");

        let mut affected: Vec<NodeId> = self.neighbors_of(leaving).to_vec();
        affected.extend(self.neighbors_of(absorber).iter().copied());
        affected.retain(|&n| n != leaving);
        affected.sort();
        affected.dedup();
        let old_lists: Vec<(NodeId, Vec<NodeId>)> =
            affected.iter().map(|&n| (n, self.neighbors_of(n).to_vec())).collect();

        self.zones[leaving.index()] = None;
        self.neighbors[leaving.index()].clear();
        self.zones[absorber.index()] = Some(merged);
        self.live -= 1;
        self.grid = None;

        let mut absorber_nbrs: Vec<NodeId> =
            affected.iter().copied().filter(|&n| n != absorber && self.zone(n).borders(&merged)).collect();
        absorber_nbrs.sort();
        self.neighbors[absorber.index()] = absorber_nbrs.clone();
        for &n in &affected {
            if n == absorber {
                continue;
            }
            let list = &mut self.neighbors[n.index()];
            list.retain(|&x| x != leaving && x != absorber);
            if absorber_nbrs.contains(&n) {
                list.push(absorber);
            }
            list.sort();
        }

        let patches = old_lists
            .iter()
            .map(|(node, old)| {
                let rename = |gone: NodeId| {
                    if transfer && gone == leaving && *node != absorber {
                        Some(absorber)
                    } else {
                        None
                    }
                };
                build_patch(*node, old, self.neighbors_of(*node), rename)
            })
            .collect();
        Ok(LeaveOutcome { leaving, absorber, patches })
    }

    /// Sum of areas and pairwise disjointness of all zones.
    pub fn check_tiling(&self) -> Result<(), String> {
        let zones: Vec<(NodeId, Zone)> = self.nodes().map(|n| (n, *self.zone(n))).collect();
        let area: f64 = zones.iter().map(|(_, z)| z.area()).sum();
        if (area - 1.0).abs() > 1e-12 {
            return Err(format!("zone areas sum to {area}"));
        }
        for (i, (a, za)) in zones.iter().enumerate() {
            for (b, zb) in &zones[i + 1..] {
                if za.overlaps(zb) {
                    return Err(format!("zones of {a} and {b} overlap"));
                }
            }
        }
        Ok(())
    }

    /// Neighbor lists are symmetric and match the border relation exactly.
    pub fn check_neighbors(&self) -> Result<(), String> {
        let nodes: Vec<NodeId> = self.nodes().collect();
        for &a in &nodes {
            let list = self.neighbors_of(a);
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("neighbor list of {a} not strictly sorted"));
            }
            for &b in &nodes {
                if a == b {
                    continue;
                }
                let bordering = self.zone(a).borders(self.zone(b));
                if bordering != list.contains(&b) {
                    return Err(format!("neighbor relation {a}-{b} disagrees with geometry"));
                }
                if list.contains(&b) != self.neighbors_of(b).contains(&a) {
                    return Err(format!("neighbor relation {a}-{b} not symmetric"));
                }
            }
        }
        Ok(())
    }
}

fn build_patch(
    node: NodeId,
    old: &[NodeId],
    new: &[NodeId],
    rename: impl Fn(NodeId) -> Option<NodeId>,
) -> BitVectorPatch {
    let slots = new
        .iter()
        .map(|nb| {
            let kept = old.iter().position(|o| o == nb);
            let renamed =
                old.iter().enumerate().find(|(_, o)| !new.contains(o) && rename(**o) == Some(*nb)).map(|(i, _)| i);
            match (kept, renamed) {
                (Some(i), Some(j)) => SlotSource::Union(i, j),
                (Some(i), None) | (None, Some(i)) => SlotSource::From(i),
                (None, None) => SlotSource::Fresh,
            }
        })
        .collect();
    BitVectorPatch { node, slots }
}
