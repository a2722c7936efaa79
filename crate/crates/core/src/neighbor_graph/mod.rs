//! Proximity graph over segments, prediction flags and subgraph snapshots.

mod cache;
mod plan;
mod topology;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::FeatureCache;
pub use plan::{mark_dirty_and_plan, RecomputePlan};
pub use topology::{EdgeKey, Topology};

use crate::scene_map::{FrameOutcome, Point, SceneMap, SegmentId, SegmentProperties, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Bounding-box gap (meters) below which two segments are neighbors.
    pub proximity_threshold: f64,
    /// Relative size change that triggers a new prediction.
    pub resize_ratio: f64,
    /// Frames after which a segment is predicted again regardless of size.
    pub stale_frames: u64,
    /// Segments with fewer points stay in the map but out of the graph.
    pub min_segment_points: usize,
    /// Frames between full all-pairs edge sweeps; 0 disables them.
    pub full_sweep_interval: u64,
    /// Points sampled per segment for the point encoder.
    pub sample_points: usize,
    pub sample_seed: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            proximity_threshold: 0.5,
            resize_ratio: 0.10,
            stale_frames: 60,
            min_segment_points: 512,
            full_sweep_interval: 60,
            sample_points: 128,
            sample_seed: 0,
        }
    }
}

impl GraphConfig {
    /// Settings for the small synthetic scenes.
    pub fn desk() -> Self {
        Self {
            min_segment_points: 64,
            ..Self::default()
        }
    }
}

/// Gap between two axis-aligned boxes given by their corners; zero when
/// they overlap.
pub fn bbox_distance(a: (Vec3, Vec3), b: (Vec3, Vec3)) -> f64 {
    let mut sq = 0.0;
    for k in 0..3 {
        let (ca, cb) = ((a.0[k] + a.1[k]) / 2.0, (b.0[k] + b.1[k]) / 2.0);
        let (ea, eb) = (a.1[k] - a.0[k], b.1[k] - b.0[k]);
        let gap = ((ca - cb).abs() - (ea + eb) / 2.0).max(0.0);
        sq += gap * gap;
    }
    sq.sqrt()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeDelta {
    pub added: Vec<EdgeKey>,
    pub removed: Vec<EdgeKey>,
}

impl EdgeDelta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty()
    }
}

/// Change to the graph shipped to the prediction side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopologyChange {
    NodeRemoved(SegmentId),
    EdgeAdded(SegmentId, SegmentId),
    EdgeRemoved(SegmentId, SegmentId),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeState {
    pub bounds: (Vec3, Vec3),
    pub size: usize,
    pub last_predicted_frame: Option<u64>,
    pub last_predicted_size: usize,
}

impl NodeState {
    pub fn new(bounds: (Vec3, Vec3), size: usize) -> Self {
        Self {
            bounds,
            size,
            last_predicted_frame: None,
            last_predicted_size: 0,
        }
    }

    pub fn needs_prediction(&self, frame: u64, config: &GraphConfig) -> bool {
        let Some(last) = self.last_predicted_frame else {
            return true;
        };
        let base = self.last_predicted_size.max(1) as f64;
        let ratio = (self.size as f64 - self.last_predicted_size as f64).abs() / base;
        ratio > config.resize_ratio || frame.saturating_sub(last) >= config.stale_frames
    }
}

/// Segment data frozen at snapshot time.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenSegment {
    pub id: SegmentId,
    pub size: usize,
    pub properties: SegmentProperties,
    pub points: Vec<Point>,
}

/// Immutable input of one prediction pass.
///
/// `fresh` carries new inputs for the flagged segments, `changes` the
/// topology journal since the previous snapshot. `nodes` and `edges` are the
/// extracted subgraph whose outputs get fused.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SubgraphSnapshot {
    pub frame: u64,
    pub nodes: BTreeSet<SegmentId>,
    pub edges: BTreeSet<EdgeKey>,
    pub fresh: Vec<FrozenSegment>,
    pub changes: Vec<TopologyChange>,
}

impl SubgraphSnapshot {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.fresh.is_empty() && self.changes.is_empty()
    }

    /// Folds a later snapshot into this one; fresh inputs of the later
    /// snapshot win and journals concatenate.
    pub fn coalesce(&mut self, later: SubgraphSnapshot) {
        self.frame = later.frame;
        self.nodes.extend(later.nodes);
        self.edges.extend(later.edges);
        for seg in later.fresh {
            self.fresh.retain(|s| s.id != seg.id);
            self.fresh.push(seg);
        }
        self.changes.extend(later.changes);
        let mut gone = BTreeSet::new();
        for change in &self.changes {
            if let TopologyChange::NodeRemoved(id) = change {
                gone.insert(*id);
            }
        }
        self.nodes.retain(|n| !gone.contains(n));
        self.edges.retain(|(a, b)| !gone.contains(a) && !gone.contains(b));
    }
}

/// Deterministic reservoir sample of up to `n` points.
pub fn sample_points(points: &[Point], n: usize, seed: u64) -> Vec<Point> {
    if points.len() <= n {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<Point> = points[..n].to_vec();
    for (i, p) in points.iter().enumerate().skip(n) {
        let j = rng.gen_range(0..=i);
        if j < n {
            reservoir[j] = *p;
        }
    }
    reservoir
}

fn sample_seed(base: u64, id: SegmentId, size: usize) -> u64 {
    // splitmix-style mixing keeps nearby ids far apart
    let mut z = base
        ^ (u64::from(id.0)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (size as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Proximity graph plus per-segment prediction bookkeeping.
#[derive(Clone, Debug, Default)]
pub struct NeighborGraph {
    pub config: GraphConfig,
    topology: Topology,
    nodes: BTreeMap<SegmentId, NodeState>,
    journal: Vec<TopologyChange>,
    last_sweep: u64,
}

impl NeighborGraph {
    pub fn new(config: GraphConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn node(&self, id: SegmentId) -> Option<&NodeState> {
        self.nodes.get(&id)
    }

    pub fn contains(&self, id: SegmentId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn has_edge(&self, a: SegmentId, b: SegmentId) -> bool {
        self.topology.has_edge(a, b)
    }

    /// Inserts or refreshes a node's box and size. Bookkeeping of an
    /// existing node is kept.
    pub fn upsert_node(&mut self, id: SegmentId, bounds: (Vec3, Vec3), size: usize) {
        self.topology.add_node(id);
        self.nodes
            .entry(id)
            .and_modify(|n| {
                n.bounds = bounds;
                n.size = size;
            })
            .or_insert_with(|| NodeState::new(bounds, size));
    }

    pub fn remove_node(&mut self, id: SegmentId) -> EdgeDelta {
        let mut delta = EdgeDelta::default();
        if self.nodes.remove(&id).is_none() {
            return delta;
        }
        for n in self.topology.remove_node(id) {
            delta.removed.push(ordered(id, n));
        }
        self.journal.push(TopologyChange::NodeRemoved(id));
        delta
    }

    /// Brings the graph in line with a frame applied to `map`: removed
    /// segments leave, touched segments with enough points enter or update.
    /// Returns the ids whose geometry changed in the graph.
    pub fn sync_with_map(&mut self, map: &SceneMap, outcome: &FrameOutcome) -> (Vec<SegmentId>, EdgeDelta) {
        let mut delta = EdgeDelta::default();
        for &id in &outcome.removed {
            let d = self.remove_node(id);
            delta.removed.extend(d.removed);
        }
        let mut touched = Vec::new();
        for &id in &outcome.touched {
            let Some(seg) = map.get(id) else { continue };
            if seg.len() < self.config.min_segment_points {
                continue;
            }
            let bounds = seg.bbox_bounds().expect("non-empty segment");
            self.upsert_node(id, bounds, seg.len());
            touched.push(id);
        }
        (touched, delta)
    }

    fn set_edge(&mut self, a: SegmentId, b: SegmentId, present: bool, delta: &mut EdgeDelta) {
        if present {
            if self.topology.add_edge(a, b) {
                delta.added.push(ordered(a, b));
                self.journal.push(TopologyChange::EdgeAdded(a, b));
            }
        } else if self.topology.remove_edge(a, b) {
            delta.removed.push(ordered(a, b));
            self.journal.push(TopologyChange::EdgeRemoved(a, b));
        }
    }

    /// Re-evaluates every edge incident to `touched` against `threshold`.
    pub fn maintain_edges(&mut self, touched: &[SegmentId], threshold: f64) -> EdgeDelta {
        let mut delta = EdgeDelta::default();
        let ids: Vec<SegmentId> = self.nodes.keys().copied().collect();
        for &t in touched {
            let Some(tb) = self.nodes.get(&t).map(|n| n.bounds) else {
                continue;
            };
            for &other in &ids {
                if other == t {
                    continue;
                }
                let near = bbox_distance(tb, self.nodes[&other].bounds) <= threshold;
                self.set_edge(t, other, near, &mut delta);
            }
        }
        delta
    }

    /// All-pairs edge evaluation.
    pub fn full_sweep(&mut self, threshold: f64) -> EdgeDelta {
        let ids: Vec<SegmentId> = self.nodes.keys().copied().collect();
        self.maintain_edges(&ids, threshold)
    }

    /// Runs the periodic full sweep when it is due.
    pub fn maybe_full_sweep(&mut self, frame: u64) -> Option<EdgeDelta> {
        let interval = self.config.full_sweep_interval;
        if interval == 0 || frame < self.last_sweep + interval {
            return None;
        }
        self.last_sweep = frame;
        Some(self.full_sweep(self.config.proximity_threshold))
    }

    /// Segments that were never predicted, grew or shrank by more than the
    /// resize ratio, or went stale.
    pub fn flag_for_prediction(&self, frame: u64) -> BTreeSet<SegmentId> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.needs_prediction(frame, &self.config))
            .map(|(&id, _)| id)
            .collect()
    }

    /// Segments whose size differs from the one last predicted, plus the
    /// never-predicted ones.
    pub fn changed_since_prediction(&self) -> BTreeSet<SegmentId> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.last_predicted_frame.is_none() || n.size != n.last_predicted_size)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn mark_predicted(&mut self, id: SegmentId, frame: u64) {
        if let Some(n) = self.nodes.get_mut(&id) {
            n.last_predicted_frame = Some(frame);
            n.last_predicted_size = n.size;
        }
    }

    /// Flagged nodes, their direct neighbors and all edges among them.
    pub fn extract_subgraph(&self, flagged: &BTreeSet<SegmentId>) -> (BTreeSet<SegmentId>, BTreeSet<EdgeKey>) {
        let nodes = self.topology.ball(flagged.iter().copied(), 1);
        let edges = self.topology.induced(&nodes).undirected_edges().into_iter().collect();
        (nodes, edges)
    }

    /// Freezes the flagged segments and the pending topology journal into a
    /// snapshot and records the prediction bookkeeping.
    pub fn snapshot(&mut self, map: &SceneMap, flagged: &BTreeSet<SegmentId>, frame: u64) -> SubgraphSnapshot {
        let flagged: BTreeSet<SegmentId> = flagged
            .iter()
            .copied()
            .filter(|id| self.nodes.contains_key(id) && map.contains(*id))
            .collect();
        let (nodes, edges) = self.extract_subgraph(&flagged);
        let mut fresh = Vec::with_capacity(flagged.len());
        for &id in &flagged {
            let seg = map.get(id).expect("flagged segment is live");
            let seed = sample_seed(self.config.sample_seed, id, seg.len());
            fresh.push(FrozenSegment {
                id,
                size: seg.len(),
                properties: seg.properties().expect("non-empty segment"),
                points: sample_points(seg.points(), self.config.sample_points, seed),
            });
            self.mark_predicted(id, frame);
        }
        SubgraphSnapshot {
            frame,
            nodes,
            edges,
            fresh,
            changes: std::mem::take(&mut self.journal),
        }
    }
}

fn ordered(a: SegmentId, b: SegmentId) -> EdgeKey {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}
