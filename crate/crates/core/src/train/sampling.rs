use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;

use super::LabeledGraph;
use crate::neighbor_graph::Topology;
use crate::scene_map::{Point, SegmentId};
use crate::spn::{GraphBatch, NodeInput, PointChannels, SpnError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub seeds: usize,
    pub hops: usize,
    /// Probability of dropping each undirected edge.
    pub edge_dropout: f64,
    pub points_per_segment: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            seeds: 2,
            hops: 4,
            edge_dropout: 0.5,
            points_per_segment: 128,
        }
    }
}

/// A training batch together with its labels, aligned with the batch's
/// nodes and directed edges.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub batch: GraphBatch,
    pub node_labels: Vec<Option<usize>>,
    pub edge_labels: Vec<Option<usize>>,
}

/// Ball of `hops` around `seeds` random seeds, induced edges thinned by
/// dropout with both directions of an edge dropped together.
pub fn sample_topology(topology: &Topology, config: &SamplingConfig, rng: &mut impl Rng) -> Topology {
    let nodes: Vec<SegmentId> = topology.nodes().collect();
    if nodes.is_empty() {
        return Topology::new();
    }
    let seeds: Vec<SegmentId> = (0..config.seeds.max(1))
        .map(|_| nodes[rng.gen_range(0..nodes.len())])
        .collect();
    let ball = topology.ball(seeds, config.hops);
    let induced = topology.induced(&ball);
    let mut out = Topology::new();
    for &id in &ball {
        out.add_node(id);
    }
    for (a, b) in induced.undirected_edges() {
        if !rng.gen_bool(config.edge_dropout.clamp(0.0, 1.0)) {
            out.add_edge(a, b);
        }
    }
    out
}

pub(crate) fn resample(points: &[Point], n: usize, rng: &mut impl Rng) -> Vec<Point> {
    if points.len() <= n {
        return points.to_vec();
    }
    let mut picked = index::sample(rng, points.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| points[i]).collect()
}

/// Draws one training subgraph with freshly resampled points.
pub fn sample_training_subgraph(
    graph: &LabeledGraph,
    config: &SamplingConfig,
    channels: PointChannels,
    rng: &mut impl Rng,
) -> Result<TrainingSample, SpnError> {
    let topology = sample_topology(&graph.topology, config, rng);
    let mut inputs = BTreeMap::new();
    for id in topology.nodes() {
        let seg = &graph.segments[&id];
        let pts = resample(&seg.points, config.points_per_segment, rng);
        inputs.insert(id, NodeInput::new(id, &pts, seg.properties, channels)?);
    }
    Ok(graph.sample_from(inputs, &topology))
}

impl LabeledGraph {
    /// Batch over `topology` using the given inputs, with labels attached.
    pub fn sample_from(&self, inputs: BTreeMap<SegmentId, NodeInput>, topology: &Topology) -> TrainingSample {
        let batch = GraphBatch::from_topology(&inputs, topology);
        let node_labels = batch.nodes.iter().map(|n| self.segments[&n.id].label).collect();
        let edge_labels = batch
            .edge_keys()
            .iter()
            .map(|k| self.edge_labels.get(k).copied())
            .collect();
        TrainingSample {
            batch,
            node_labels,
            edge_labels,
        }
    }

    /// The whole graph with deterministic inputs (every point up to `n`,
    /// evenly strided).
    pub fn full_sample(&self, n: usize, channels: PointChannels) -> Result<TrainingSample, SpnError> {
        let mut inputs = BTreeMap::new();
        for (&id, seg) in &self.segments {
            let stride = seg.points.len().div_ceil(n.max(1)).max(1);
            let pts: Vec<Point> = seg.points.iter().step_by(stride).copied().collect();
            inputs.insert(id, NodeInput::new(id, &pts, seg.properties, channels)?);
        }
        Ok(self.sample_from(inputs, &self.topology))
    }
}

/// Ids reachable within `hops` of `seeds`; exposed for checks against the
/// sampler.
pub fn hop_ball(topology: &Topology, seeds: &[SegmentId], hops: usize) -> BTreeSet<SegmentId> {
    topology.ball(seeds.iter().copied(), hops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(n: u32) -> Topology {
        Topology::from_edges((1..=n).map(SegmentId), (1..n).map(|i| (SegmentId(i), SegmentId(i + 1))))
    }

    #[test]
    fn two_node_scene_is_kept_whole() {
        let t = chain(2);
        let cfg = SamplingConfig {
            edge_dropout: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let s = sample_topology(&t, &cfg, &mut rng);
            assert_eq!(s, t);
        }
    }

    #[test]
    fn chain_ball_from_first_node() {
        let t = chain(10);
        let ball = hop_ball(&t, &[SegmentId(1), SegmentId(1)], 4);
        assert_eq!(ball, (1..=5).map(SegmentId).collect());
    }

    #[test]
    fn sampled_nodes_are_a_union_of_two_balls() {
        let t = chain(10);
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = sample_topology(&t, &cfg, &mut rng);
            let nodes: BTreeSet<SegmentId> = s.nodes().collect();
            // every ball in a chain of 10 with 4 hops spans at least 5 nodes
            assert!(nodes.len() >= 5);
            for (a, b) in s.undirected_edges() {
                assert!(t.has_edge(a, b));
                assert!(s.has_edge(b, a));
            }
        }
    }

    #[test]
    fn half_of_the_edges_survive_on_average() {
        let t = chain(21);
        let cfg = SamplingConfig {
            hops: 40,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kept: usize = (0..1000)
            .map(|_| sample_topology(&t, &cfg, &mut rng).undirected_edges().len())
            .sum();
        let frac = kept as f64 / (1000.0 * 20.0);
        assert!((frac - 0.5).abs() < 0.05, "{frac}");
    }

    #[test]
    fn resampling_caps_and_keeps_order() {
        let pts: Vec<Point> = (0..50).map(|i| Point::at([i as f64, 0.0, 0.0])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = resample(&pts, 10, &mut rng);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0].position[0] < w[1].position[0]));
        assert_eq!(resample(&pts[..4], 10, &mut rng).len(), 4);
    }
}
