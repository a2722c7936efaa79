use std::collections::BTreeMap;

use super::plan::RecomputePlan;
use super::topology::EdgeKey;
use crate::scene_map::SegmentId;

/// Stored per-layer features of the prediction network.
///
/// Layer 0 holds the encoder outputs, layer `l` the output of message
/// passing layer `l`. A feature is valid while none of its inputs changed;
/// [`FeatureCache::invalidate`] drops everything a plan is about to
/// recompute.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    pub nodes: Vec<BTreeMap<SegmentId, Vec<f64>>>,
    pub edges: Vec<BTreeMap<EdgeKey, Vec<f64>>>,
    pub node_logits: BTreeMap<SegmentId, Vec<f64>>,
    pub edge_logits: BTreeMap<EdgeKey, Vec<f64>>,
}

impl FeatureCache {
    pub fn new(layers: usize) -> Self {
        Self {
            nodes: vec![BTreeMap::new(); layers + 1],
            edges: vec![BTreeMap::new(); layers + 1],
            node_logits: BTreeMap::new(),
            edge_logits: BTreeMap::new(),
        }
    }

    pub fn layers(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    pub fn node(&self, layer: usize, id: SegmentId) -> Option<&[f64]> {
        self.nodes.get(layer)?.get(&id).map(Vec::as_slice)
    }

    pub fn edge(&self, layer: usize, key: EdgeKey) -> Option<&[f64]> {
        self.edges.get(layer)?.get(&key).map(Vec::as_slice)
    }

    pub fn invalidate(&mut self, plan: &RecomputePlan) {
        let last = plan.layers();
        for (layer, ids) in plan.nodes.iter().enumerate() {
            for id in ids {
                self.nodes[layer].remove(id);
                if layer == last {
                    self.node_logits.remove(id);
                }
            }
        }
        for (layer, keys) in plan.edges.iter().enumerate() {
            for key in keys {
                self.edges[layer].remove(key);
                if layer == last {
                    self.edge_logits.remove(key);
                }
            }
        }
    }

    pub fn remove_node(&mut self, id: SegmentId) {
        for layer in &mut self.nodes {
            layer.remove(&id);
        }
        for layer in &mut self.edges {
            layer.retain(|&(a, b), _| a != id && b != id);
        }
        self.node_logits.remove(&id);
        self.edge_logits.retain(|&(a, b), _| a != id && b != id);
    }

    pub fn remove_edge(&mut self, a: SegmentId, b: SegmentId) {
        for key in [(a, b), (b, a)] {
            for layer in &mut self.edges {
                layer.remove(&key);
            }
            self.edge_logits.remove(&key);
        }
    }

    pub fn clear(&mut self) {
        *self = Self::new(self.layers());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighbor_graph::{mark_dirty_and_plan, Topology};

    #[test]
    fn invalidate_drops_planned_entries_only() {
        let s = SegmentId;
        let t = Topology::from_edges([], [(s(1), s(2)), (s(2), s(3))]);
        let mut cache = FeatureCache::new(2);
        for l in 0..=2 {
            for n in t.nodes() {
                cache.nodes[l].insert(n, vec![l as f64]);
            }
            for e in t.directed_edges() {
                cache.edges[l].insert(e, vec![0.0]);
            }
        }
        for n in t.nodes() {
            cache.node_logits.insert(n, vec![0.0]);
        }
        let plan = mark_dirty_and_plan(&t, &[s(1)].into(), 2);
        cache.invalidate(&plan);
        assert!(cache.node(0, s(1)).is_none());
        assert!(cache.node(0, s(2)).is_some());
        assert!(cache.node(1, s(3)).is_some());
        assert!(cache.node(2, s(3)).is_none());
        assert!(cache.edge(1, (s(2), s(3))).is_some());
        assert!(cache.node_logits.is_empty());
    }
}
