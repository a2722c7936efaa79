use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::scene_map::SegmentId;

pub type EdgeKey = (SegmentId, SegmentId);

/// Undirected adjacency over segment ids without self loops.
///
/// The network consumes each undirected edge as two directed edges; see
/// [`Topology::directed_edges`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Topology {
    adj: BTreeMap<SegmentId, BTreeSet<SegmentId>>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_edges(nodes: impl IntoIterator<Item = SegmentId>, edges: impl IntoIterator<Item = EdgeKey>) -> Self {
        let mut t = Self::new();
        for n in nodes {
            t.add_node(n);
        }
        for (a, b) in edges {
            t.add_edge(a, b);
        }
        t
    }

    pub fn add_node(&mut self, id: SegmentId) -> bool {
        if self.adj.contains_key(&id) {
            return false;
        }
        self.adj.insert(id, BTreeSet::new());
        true
    }

    /// Removes the node and returns the neighbors it was connected to.
    pub fn remove_node(&mut self, id: SegmentId) -> Vec<SegmentId> {
        let Some(neighbors) = self.adj.remove(&id) else {
            return Vec::new();
        };
        for n in &neighbors {
            if let Some(set) = self.adj.get_mut(n) {
                set.remove(&id);
            }
        }
        neighbors.into_iter().collect()
    }

    /// Adds an undirected edge, creating missing endpoints. Returns false
    /// for self edges and edges that already exist.
    pub fn add_edge(&mut self, a: SegmentId, b: SegmentId) -> bool {
        if a == b {
            return false;
        }
        let fresh = self.adj.entry(a).or_default().insert(b);
        self.adj.entry(b).or_default().insert(a);
        fresh
    }

    pub fn remove_edge(&mut self, a: SegmentId, b: SegmentId) -> bool {
        let removed = self.adj.get_mut(&a).is_some_and(|s| s.remove(&b));
        if let Some(s) = self.adj.get_mut(&b) {
            s.remove(&a);
        }
        removed
    }

    pub fn contains_node(&self, id: SegmentId) -> bool {
        self.adj.contains_key(&id)
    }

    pub fn has_edge(&self, a: SegmentId, b: SegmentId) -> bool {
        self.adj.get(&a).is_some_and(|s| s.contains(&b))
    }

    pub fn neighbors(&self, id: SegmentId) -> impl Iterator<Item = SegmentId> + '_ {
        self.adj.get(&id).into_iter().flatten().copied()
    }

    pub fn degree(&self, id: SegmentId) -> usize {
        self.adj.get(&id).map_or(0, |s| s.len())
    }

    pub fn nodes(&self) -> impl Iterator<Item = SegmentId> + '_ {
        self.adj.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    /// Undirected edges as `(a, b)` with `a < b`, ascending.
    pub fn undirected_edges(&self) -> Vec<EdgeKey> {
        self.adj
            .iter()
            .flat_map(|(&a, set)| set.range(a..).map(move |&b| (a, b)))
            .filter(|&(a, b)| a != b)
            .collect()
    }

    /// Both directions of every edge, sorted by `(source, target)`.
    pub fn directed_edges(&self) -> Vec<EdgeKey> {
        self.adj
            .iter()
            .flat_map(|(&a, set)| set.iter().map(move |&b| (a, b)))
            .collect()
    }

    /// Nodes within `hops` edges of any seed (seeds included). Seeds that
    /// are not in the graph are ignored.
    pub fn ball(&self, seeds: impl IntoIterator<Item = SegmentId>, hops: usize) -> BTreeSet<SegmentId> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::new();
        for s in seeds {
            if self.contains_node(s) && seen.insert(s) {
                queue.push_back((s, 0));
            }
        }
        while let Some((n, d)) = queue.pop_front() {
            if d == hops {
                continue;
            }
            for m in self.neighbors(n) {
                if seen.insert(m) {
                    queue.push_back((m, d + 1));
                }
            }
        }
        seen
    }

    /// Subgraph induced by `nodes`.
    pub fn induced(&self, nodes: &BTreeSet<SegmentId>) -> Topology {
        let mut t = Topology::new();
        for &n in nodes {
            if !self.contains_node(n) {
                continue;
            }
            t.add_node(n);
            for m in self.neighbors(n) {
                if nodes.contains(&m) {
                    t.add_edge(n, m);
                }
            }
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(i: u32) -> SegmentId {
        SegmentId(i)
    }

    #[test]
    fn directed_materialization_is_symmetric() {
        let t = Topology::from_edges([s(1), s(2), s(3)], [(s(1), s(2)), (s(3), s(2))]);
        let directed = t.directed_edges();
        assert_eq!(directed.len(), 4);
        for &(a, b) in &directed {
            assert!(directed.contains(&(b, a)));
        }
        assert_eq!(t.undirected_edges(), vec![(s(1), s(2)), (s(2), s(3))]);
    }

    #[test]
    fn no_self_edges() {
        let mut t = Topology::new();
        assert!(!t.add_edge(s(1), s(1)));
        assert!(t.directed_edges().is_empty());
    }

    #[test]
    fn ball_on_chain() {
        let t = Topology::from_edges([], (1..5).map(|i| (s(i), s(i + 1))));
        assert_eq!(t.ball([s(1)], 0), [s(1)].into());
        assert_eq!(t.ball([s(1)], 2), [s(1), s(2), s(3)].into());
        assert_eq!(t.ball([s(3)], 1), [s(2), s(3), s(4)].into());
        assert!(t.ball([s(42)], 3).is_empty());
    }

    #[test]
    fn remove_node_drops_incident_edges() {
        let mut t = Topology::from_edges([], [(s(1), s(2)), (s(2), s(3))]);
        assert_eq!(t.remove_node(s(2)), vec![s(1), s(3)]);
        assert!(t.directed_edges().is_empty());
        assert_eq!(t.node_count(), 2);
    }
}
