//! Running-average fusion of repeated predictions and instance clustering
//! over `same part` edges.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neighbor_graph::{EdgeKey, Topology};
use crate::scene_map::{SegmentId, SegmentProperties};
use crate::spn::Prediction;

pub const W_MAX: f64 = 100.0;
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("distribution sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("distribution has {got} entries, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("negative or non-finite probability")]
    Invalid,
    #[error("malformed graph document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema version {0}")]
    Schema(u32),
}

fn check_normalized(p: &[f64]) -> Result<(), FusionError> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(FusionError::Invalid);
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(FusionError::NotNormalized(sum));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedDistribution {
    pub probabilities: Vec<f64>,
    pub weight: f64,
}

impl FusedDistribution {
    pub fn new(probabilities: Vec<f64>, weight: f64) -> Result<Self, FusionError> {
        check_normalized(&probabilities)?;
        Ok(Self {
            probabilities,
            weight: weight.min(W_MAX),
        })
    }

    /// Weighted average with an incoming distribution; the accumulated
    /// weight saturates at [`W_MAX`].
    pub fn fuse(&mut self, incoming: &[f64], weight: f64) -> Result<(), FusionError> {
        check_normalized(incoming)?;
        if incoming.len() != self.probabilities.len() {
            return Err(FusionError::Length {
                expected: self.probabilities.len(),
                got: incoming.len(),
            });
        }
        let total = weight + self.weight;
        for (mu, &x) in self.probabilities.iter_mut().zip(incoming) {
            *mu = (x * weight + *mu * self.weight) / total;
        }
        let sum: f64 = self.probabilities.iter().sum();
        self.probabilities.iter_mut().for_each(|p| *p /= sum);
        self.weight = total.min(W_MAX);
        Ok(())
    }

    pub fn argmax(&self) -> usize {
        crate::train::argmax(&self.probabilities)
    }
}

/// Node-to-instance assignment with the voted class of every instance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstancePartition {
    pub instance_of: BTreeMap<SegmentId, SegmentId>,
    /// Instance id (its smallest member) → (members, class).
    pub instances: BTreeMap<SegmentId, (Vec<SegmentId>, usize)>,
}

/// Union-find over segment ids.
#[derive(Debug, Default)]
struct DisjointSets {
    parent: BTreeMap<SegmentId, SegmentId>,
}

impl DisjointSets {
    fn find(&mut self, x: SegmentId) -> SegmentId {
        let p = *self.parent.entry(x).or_insert(x);
        if p == x {
            return x;
        }
        let root = self.find(p);
        self.parent.insert(x, root);
        root
    }

    fn union(&mut self, a: SegmentId, b: SegmentId) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent.insert(hi, lo);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusedSceneGraph {
    pub nodes: BTreeMap<SegmentId, FusedDistribution>,
    pub edges: BTreeMap<EdgeKey, FusedDistribution>,
    /// Point counts used for the size-weighted instance vote.
    pub sizes: BTreeMap<SegmentId, usize>,
    pub same_part: usize,
    pub skipped: usize,
}

impl FusedSceneGraph {
    pub fn new(same_part: usize) -> Self {
        Self {
            same_part,
            ..Default::default()
        }
    }

    /// Fuses every node and edge of `prediction` that `live` still
    /// contains; the rest are skipped and counted.
    pub fn apply_prediction(&mut self, prediction: &Prediction, live: &Topology) -> Result<(), FusionError> {
        for (&id, p) in &prediction.nodes {
            if !live.contains_node(id) {
                self.skipped += 1;
                continue;
            }
            match self.nodes.get_mut(&id) {
                Some(d) => d.fuse(p, 1.0)?,
                None => {
                    self.nodes.insert(id, FusedDistribution::new(p.clone(), 1.0)?);
                }
            }
        }
        for (&(a, b), p) in &prediction.edges {
            if !live.has_edge(a, b) {
                self.skipped += 1;
                continue;
            }
            match self.edges.get_mut(&(a, b)) {
                Some(d) => d.fuse(p, 1.0)?,
                None => {
                    self.edges.insert((a, b), FusedDistribution::new(p.clone(), 1.0)?);
                }
            }
        }
        Ok(())
    }

    /// Drops the state of nodes and edges that left the graph; a merged
    /// segment's source disappears this way while the destination keeps its
    /// distribution.
    pub fn retain_live(&mut self, live: &Topology) {
        self.nodes.retain(|id, _| live.contains_node(*id));
        self.sizes.retain(|id, _| live.contains_node(*id));
        self.edges.retain(|&(a, b), _| live.has_edge(a, b));
    }

    pub fn set_size(&mut self, id: SegmentId, size: usize) {
        self.sizes.insert(id, size);
    }

    /// Undirected pairs whose fused predicate is `same part` both ways.
    pub fn merge_edges(&self) -> Vec<EdgeKey> {
        self.edges
            .iter()
            .filter(|(&(a, b), d)| a < b && d.argmax() == self.same_part)
            .filter(|(&(a, b), _)| self.edges.get(&(b, a)).is_some_and(|r| r.argmax() == self.same_part))
            .map(|(&k, _)| k)
            .collect()
    }

    /// Connected components of the merge graph, each labelled by the
    /// size-weighted vote of its members' arg-max classes.
    pub fn cluster_instances(&self) -> InstancePartition {
        let mut sets = DisjointSets::default();
        for &id in self.nodes.keys() {
            sets.find(id);
        }
        for (a, b) in self.merge_edges() {
            if self.nodes.contains_key(&a) && self.nodes.contains_key(&b) {
                sets.union(a, b);
            }
        }
        let mut members: BTreeMap<SegmentId, Vec<SegmentId>> = BTreeMap::new();
        for &id in self.nodes.keys() {
            members.entry(sets.find(id)).or_default().push(id);
        }
        let mut out = InstancePartition::default();
        for (root, ids) in members {
            let mut votes: BTreeMap<usize, f64> = BTreeMap::new();
            for id in &ids {
                let w = self.sizes.get(id).copied().unwrap_or(1) as f64;
                *votes.entry(self.nodes[id].argmax()).or_default() += w;
            }
            let class = votes
                .iter()
                .fold(
                    (usize::MAX, f64::NEG_INFINITY),
                    |best, (&c, &w)| if w > best.1 { (c, w) } else { best },
                )
                .0;
            for &id in &ids {
                out.instance_of.insert(id, root);
            }
            out.instances.insert(root, (ids, class));
        }
        out
    }

    /// Serializable document of the graph; `properties` supplies the
    /// geometry of each node when known.
    pub fn export(&self, properties: impl Fn(SegmentId) -> Option<SegmentProperties>) -> GraphDocument {
        let partition = self.cluster_instances();
        GraphDocument {
            schema_version: SCHEMA_VERSION,
            nodes: self
                .nodes
                .iter()
                .map(|(&id, d)| NodeRecord {
                    id,
                    probabilities: d.probabilities.clone(),
                    weight: d.weight,
                    class: d.argmax(),
                    instance: partition.instance_of[&id],
                    properties: properties(id),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|(&(source, target), d)| EdgeRecord {
                    source,
                    target,
                    probabilities: d.probabilities.clone(),
                    weight: d.weight,
                    predicate: d.argmax(),
                })
                .collect(),
            instances: partition
                .instances
                .into_iter()
                .map(|(id, (members, class))| InstanceRecord { id, class, members })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: SegmentId,
    pub probabilities: Vec<f64>,
    pub weight: f64,
    pub class: usize,
    pub instance: SegmentId,
    pub properties: Option<SegmentProperties>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub source: SegmentId,
    pub target: SegmentId,
    pub probabilities: Vec<f64>,
    pub weight: f64,
    pub predicate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: SegmentId,
    pub class: usize,
    pub members: Vec<SegmentId>,
}

/// Exported scene graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub schema_version: u32,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
    pub instances: Vec<InstanceRecord>,
}

impl GraphDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph documents always serialize")
    }

    pub fn parse(text: &str) -> Result<Self, FusionError> {
        let doc: GraphDocument = serde_json::from_str(text)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(FusionError::Schema(doc.schema_version));
        }
        Ok(doc)
    }

    /// Rebuilds the fused distributions (sizes and counters are not part
    /// of the document).
    pub fn to_graph(&self, same_part: usize) -> FusedSceneGraph {
        let mut g = FusedSceneGraph::new(same_part);
        for n in &self.nodes {
            g.nodes.insert(
                n.id,
                FusedDistribution {
                    probabilities: n.probabilities.clone(),
                    weight: n.weight,
                },
            );
        }
        for e in &self.edges {
            g.edges.insert(
                (e.source, e.target),
                FusedDistribution {
                    probabilities: e.probabilities.clone(),
                    weight: e.weight,
                },
            );
        }
        g
    }
}

/// Members of each instance, for flood-fill comparisons.
pub fn partition_sets(p: &InstancePartition) -> BTreeSet<BTreeSet<SegmentId>> {
    p.instances.values().map(|(m, _)| m.iter().copied().collect()).collect()
}
