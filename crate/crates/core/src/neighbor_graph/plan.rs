//! Dirty propagation for the layered feature cache.
//!
//! A node feature at layer `l` reads the layer `l-1` features of the node,
//! of its neighbors and of its outgoing edges, so a change in the inputs of a
//! set `C` reaches exactly the `l`-hop ball around `C`. Edge features at
//! layer `l >= 1` read both endpoints at `l-1`; layer-0 edge features read
//! the segment properties of both endpoints.

use std::collections::BTreeSet;

use super::topology::{EdgeKey, Topology};
use crate::scene_map::SegmentId;

/// Per-layer sets of node and directed-edge features to recompute.
///
/// `nodes[0]` / `edges[0]` are the encoder-level features; index `l` for
/// `l in 1..=L` is the output of message-passing layer `l`. Classifier
/// outputs are recomputed for `nodes[L]` and `edges[L]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecomputePlan {
    pub nodes: Vec<BTreeSet<SegmentId>>,
    pub edges: Vec<BTreeSet<EdgeKey>>,
}

impl RecomputePlan {
    pub fn layers(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.iter().all(|s| s.is_empty()) && self.edges.iter().all(|s| s.is_empty())
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.nodes.iter().map(|s| s.len()).collect()
    }

    pub fn edge_counts(&self) -> Vec<usize> {
        self.edges.iter().map(|s| s.len()).collect()
    }

    /// Plan that recomputes every feature of the graph.
    pub fn full(topology: &Topology, layers: usize) -> Self {
        let nodes: BTreeSet<SegmentId> = topology.nodes().collect();
        mark_dirty_and_plan(topology, &nodes, layers)
    }
}

fn incident_edges(topology: &Topology, nodes: &BTreeSet<SegmentId>) -> BTreeSet<EdgeKey> {
    let mut out = BTreeSet::new();
    for &n in nodes {
        for m in topology.neighbors(n) {
            out.insert((n, m));
            out.insert((m, n));
        }
    }
    out
}

/// Computes, per layer, the node and edge features invalidated by a change
/// of the inputs of `changed`. Ids absent from the topology are ignored.
pub fn mark_dirty_and_plan(topology: &Topology, changed: &BTreeSet<SegmentId>, layers: usize) -> RecomputePlan {
    assert!(layers >= 1, "a plan needs at least one message-passing layer");
    let mut nodes = Vec::with_capacity(layers + 1);
    let mut edges = Vec::with_capacity(layers + 1);
    let mut ball = topology.ball(changed.iter().copied(), 0);
    edges.push(incident_edges(topology, &ball));
    nodes.push(ball.clone());
    for _ in 1..=layers {
        // Edges at this layer read the endpoints of the previous one.
        edges.push(incident_edges(topology, &ball));
        let mut next = ball.clone();
        for &n in &ball {
            next.extend(topology.neighbors(n));
        }
        ball = next;
        nodes.push(ball.clone());
    }
    RecomputePlan { nodes, edges }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(i: u32) -> SegmentId {
        SegmentId(i)
    }

    fn chain() -> Topology {
        Topology::from_edges([], [(s(1), s(2)), (s(2), s(3))])
    }

    #[test]
    fn chain_update_at_end() {
        let plan = mark_dirty_and_plan(&chain(), &[s(1)].into(), 2);
        assert_eq!(plan.nodes[0], [s(1)].into());
        assert_eq!(plan.nodes[1], [s(1), s(2)].into());
        assert_eq!(plan.nodes[2], [s(1), s(2), s(3)].into());
        assert_eq!(plan.edges[0], [(s(1), s(2)), (s(2), s(1))].into());
        assert_eq!(plan.edges[1], plan.edges[0]);
        assert_eq!(plan.edges[2].len(), 4);
    }

    #[test]
    fn empty_change_gives_empty_plan() {
        for layers in 1..4 {
            let plan = mark_dirty_and_plan(&chain(), &BTreeSet::new(), layers);
            assert!(plan.is_empty());
            assert_eq!(plan.layers(), layers);
        }
    }

    #[test]
    fn star_center_reaches_all_leaves() {
        let t = Topology::from_edges([], (1..=6).map(|i| (s(0), s(i))));
        let plan = mark_dirty_and_plan(&t, &[s(0)].into(), 1);
        assert_eq!(plan.nodes[1].len(), 7);
    }

    #[test]
    fn plan_matches_bfs_balls() {
        let t = Topology::from_edges(
            [],
            [(s(1), s(2)), (s(2), s(3)), (s(3), s(4)), (s(2), s(5)), (s(6), s(7))],
        );
        let changed: BTreeSet<_> = [s(1), s(6)].into();
        let plan = mark_dirty_and_plan(&t, &changed, 3);
        for l in 0..=3 {
            assert_eq!(plan.nodes[l], t.ball(changed.iter().copied(), l));
        }
    }
}
