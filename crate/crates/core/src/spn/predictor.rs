use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::features::NodeInput;
use super::model::{RecomputeStats, Spn};
use super::SpnError;
use crate::neighbor_graph::{
    mark_dirty_and_plan, EdgeKey, FeatureCache, RecomputePlan, SubgraphSnapshot, Topology, TopologyChange,
};
use crate::scene_map::SegmentId;

/// Class probabilities per node and predicate probabilities per directed
/// edge from one prediction pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prediction {
    pub frame: u64,
    pub nodes: BTreeMap<SegmentId, Vec<f64>>,
    pub edges: BTreeMap<EdgeKey, Vec<f64>>,
}

/// State of the prediction worker: a mirror of the neighbor graph with the
/// latest frozen inputs of every segment and the layered feature cache.
#[derive(Debug)]
pub struct IncrementalPredictor {
    spn: Arc<Spn>,
    inputs: BTreeMap<SegmentId, NodeInput>,
    topology: Topology,
    cache: FeatureCache,
    use_cache: bool,
}

impl IncrementalPredictor {
    pub fn new(spn: Arc<Spn>) -> Self {
        let layers = spn.layers.len();
        Self {
            spn,
            inputs: BTreeMap::new(),
            topology: Topology::new(),
            cache: FeatureCache::new(layers),
            use_cache: true,
        }
    }

    /// Recompute every feature on every pass instead of reusing the cache.
    pub fn without_cache(mut self) -> Self {
        self.use_cache = false;
        self
    }

    pub fn spn(&self) -> &Spn {
        &self.spn
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn cache(&self) -> &FeatureCache {
        &self.cache
    }

    pub fn inputs(&self) -> &BTreeMap<SegmentId, NodeInput> {
        &self.inputs
    }

    /// Folds a snapshot into the mirror and returns the segments whose
    /// inputs or adjacency changed.
    pub fn apply(&mut self, snapshot: &SubgraphSnapshot) -> Result<BTreeSet<SegmentId>, SpnError> {
        let channels = self.spn.config.channels;
        let mut changed = BTreeSet::new();
        for seg in &snapshot.fresh {
            self.inputs.insert(seg.id, NodeInput::from_frozen(seg, channels)?);
            self.topology.add_node(seg.id);
            changed.insert(seg.id);
        }
        for change in &snapshot.changes {
            match *change {
                TopologyChange::NodeRemoved(id) => {
                    for n in self.topology.remove_node(id) {
                        changed.insert(n);
                    }
                    self.inputs.remove(&id);
                    self.cache.remove_node(id);
                    changed.remove(&id);
                }
                TopologyChange::EdgeAdded(a, b) => {
                    if self.inputs.contains_key(&a) && self.inputs.contains_key(&b) && self.topology.add_edge(a, b) {
                        changed.extend([a, b]);
                    }
                }
                TopologyChange::EdgeRemoved(a, b) => {
                    if self.topology.remove_edge(a, b) {
                        self.cache.remove_edge(a, b);
                        changed.extend([a, b]);
                    }
                }
            }
        }
        changed.retain(|id| self.inputs.contains_key(id));
        Ok(changed)
    }

    /// Recomputation plan for a change set under the current mode.
    pub fn plan(&mut self, changed: &BTreeSet<SegmentId>) -> RecomputePlan {
        let layers = self.spn.layers.len();
        if self.use_cache {
            mark_dirty_and_plan(&self.topology, changed, layers)
        } else {
            self.cache.clear();
            RecomputePlan::full(&self.topology, layers)
        }
    }

    /// Applies the snapshot, runs the planned recomputation and reads the
    /// outputs of the snapshot's subgraph.
    pub fn predict(
        &mut self,
        snapshot: &SubgraphSnapshot,
    ) -> Result<(Prediction, RecomputePlan, RecomputeStats), SpnError> {
        let changed = self.apply(snapshot)?;
        let plan = self.plan(&changed);
        let stats = self
            .spn
            .forward_cached(&self.inputs, &self.topology, &mut self.cache, &plan)?;
        let mut prediction = Prediction {
            frame: snapshot.frame,
            ..Default::default()
        };
        for id in &snapshot.nodes {
            if let Some(logits) = self.cache.node_logits.get(id) {
                prediction.nodes.insert(*id, Spn::probabilities(logits));
            }
        }
        for &(a, b) in &snapshot.edges {
            for key in [(a, b), (b, a)] {
                if let Some(logits) = self.cache.edge_logits.get(&key) {
                    prediction.edges.insert(key, Spn::probabilities(logits));
                }
            }
        }
        Ok((prediction, plan, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighbor_graph::FrozenSegment;
    use crate::scene_map::{recompute_properties, Point};
    use crate::spn::SpnConfig;

    fn s(i: u32) -> SegmentId {
        SegmentId(i)
    }

    fn frozen(id: u32, x: f64) -> FrozenSegment {
        let points: Vec<Point> = (0..6)
            .map(|k| {
                Point::at([
                    x + 0.1 * k as f64,
                    0.05 * (k % 2) as f64,
                    0.02 * k as f64 * f64::from(id),
                ])
            })
            .collect();
        FrozenSegment {
            id: s(id),
            size: points.len(),
            properties: recompute_properties(&points).unwrap(),
            points,
        }
    }

    fn snapshot(frame: u64, fresh: Vec<FrozenSegment>, changes: Vec<TopologyChange>) -> SubgraphSnapshot {
        let nodes = fresh.iter().map(|f| f.id).collect();
        SubgraphSnapshot {
            frame,
            nodes,
            edges: BTreeSet::new(),
            fresh,
            changes,
        }
    }

    fn check_against_full(p: &IncrementalPredictor) {
        let full = p.spn().forward_full(p.inputs(), p.topology()).unwrap();
        for (id, logits) in &full.node_logits {
            let cached = &p.cache().node_logits[id];
            assert!(logits.iter().zip(cached).all(|(a, b)| (a - b).abs() < 1e-9));
        }
        assert_eq!(full.edge_logits.len(), p.cache().edge_logits.len());
    }

    #[test]
    fn incremental_passes_match_full_recomputation() {
        let spn = Arc::new(Spn::new(SpnConfig::tiny(3, 4)).unwrap());
        let mut p = IncrementalPredictor::new(spn);
        let first = snapshot(
            1,
            vec![frozen(1, 0.0), frozen(2, 1.0), frozen(3, 2.0)],
            vec![
                TopologyChange::EdgeAdded(s(1), s(2)),
                TopologyChange::EdgeAdded(s(2), s(3)),
            ],
        );
        let (pred, plan, stats) = p.predict(&first).unwrap();
        assert!(stats.matches_plan(&plan));
        assert_eq!(pred.nodes.len(), 3);
        check_against_full(&p);

        let second = snapshot(2, vec![frozen(1, 0.2)], vec![]);
        let (_, plan, stats) = p.predict(&second).unwrap();
        assert_eq!(plan.node_counts(), vec![1, 2, 3]);
        assert!(stats.matches_plan(&plan));
        check_against_full(&p);

        let third = snapshot(3, vec![], vec![TopologyChange::NodeRemoved(s(3))]);
        let (pred, _, _) = p.predict(&third).unwrap();
        assert!(pred.nodes.is_empty());
        assert!(!p.inputs().contains_key(&s(3)));
        assert!(p.cache().node_logits.keys().all(|&id| id != s(3)));
        check_against_full(&p);
    }

    #[test]
    fn cache_free_mode_gives_the_same_predictions() {
        let spn = Arc::new(Spn::new(SpnConfig::tiny(3, 4)).unwrap());
        let mut a = IncrementalPredictor::new(spn.clone());
        let mut b = IncrementalPredictor::new(spn).without_cache();
        let snaps = [
            snapshot(
                1,
                vec![frozen(1, 0.0), frozen(2, 1.0)],
                vec![TopologyChange::EdgeAdded(s(1), s(2))],
            ),
            snapshot(2, vec![frozen(3, 1.5)], vec![TopologyChange::EdgeAdded(s(2), s(3))]),
            snapshot(3, vec![frozen(2, 1.1)], vec![TopologyChange::EdgeRemoved(s(1), s(2))]),
        ];
        for snap in &snaps {
            let (pa, _, _) = a.predict(snap).unwrap();
            let (pb, plan, _) = b.predict(snap).unwrap();
            assert_eq!(plan.nodes[0].len(), b.topology().node_count());
            for (id, x) in &pa.nodes {
                assert!(x.iter().zip(&pb.nodes[id]).all(|(u, v)| (u - v).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn edge_to_unknown_segment_is_deferred() {
        let spn = Arc::new(Spn::new(SpnConfig::tiny(3, 4)).unwrap());
        let mut p = IncrementalPredictor::new(spn);
        let snap = snapshot(1, vec![frozen(1, 0.0)], vec![TopologyChange::EdgeAdded(s(1), s(9))]);
        let changed = p.apply(&snap).unwrap();
        assert_eq!(changed, BTreeSet::from([s(1)]));
        assert!(!p.topology().has_edge(s(1), s(9)));
    }
}
