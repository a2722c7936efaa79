//! Joint loss, optimizer and the training loop.

pub mod optimizer;
pub mod sampling;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optimizer::{learning_rate, step, AdamWConfig, OptimizerState};
pub use sampling::{sample_topology, sample_training_subgraph, SamplingConfig, TrainingSample};

use crate::neighbor_graph::{EdgeKey, Topology};
use crate::scene_map::{Point, SegmentId, SegmentProperties};
use crate::spn::{BatchOutput, Spn, SpnError};
use crate::tape::{Tape, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Spn(#[from] SpnError),
    #[error("label {label} outside a vocabulary of {size}")]
    Label { label: usize, size: usize },
    #[error("no training graphs")]
    NoData,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSegment {
    pub points: Vec<Point>,
    pub properties: SegmentProperties,
    /// `None` for segments without a ground-truth match; they are excluded
    /// from the object loss.
    pub label: Option<usize>,
}

/// A fully observed scene with ground-truth labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledGraph {
    pub segments: BTreeMap<SegmentId, LabeledSegment>,
    pub topology: Topology,
    /// Predicate per directed edge of `topology`.
    pub edge_labels: BTreeMap<EdgeKey, usize>,
}

/// Value of the joint loss and its two terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub object: f64,
    pub predicate: f64,
}

fn check_labels(labels: &[Option<usize>], size: usize) -> Result<(), TrainError> {
    match labels.iter().flatten().find(|&&l| l >= size) {
        Some(&label) => Err(TrainError::Label { label, size }),
        None => Ok(()),
    }
}

/// `L_obj + weight · L_pred` on the tape; each term is a mean
/// cross-entropy over the labelled rows and zero without any.
pub fn joint_loss(
    tape: &mut Tape,
    out: &BatchOutput,
    node_labels: &[Option<usize>],
    edge_labels: &[Option<usize>],
    predicate_weight: f64,
) -> Result<(Var, LossValue), TrainError> {
    let classes = tape.value(out.node_logits).ncols();
    let predicates = tape.value(out.edge_logits).ncols();
    check_labels(node_labels, classes)?;
    check_labels(edge_labels, predicates)?;
    let obj = tape.cross_entropy(out.node_logits, node_labels);
    let pred = tape.cross_entropy(out.edge_logits, edge_labels);
    let weighted = tape.scale(pred, predicate_weight);
    let total = tape.add(obj, weighted);
    let value = LossValue {
        total: tape.value(total)[[0, 0]],
        object: tape.value(obj)[[0, 0]],
        predicate: tape.value(pred)[[0, 0]],
    };
    Ok((total, value))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Subgraphs drawn per scene and epoch.
    pub samples_per_scene: usize,
    pub predicate_weight: f64,
    pub seed: u64,
    pub seeds_per_sample: usize,
    pub hops: usize,
    pub edge_dropout: f64,
    pub points_per_segment: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            samples_per_scene: 1,
            predicate_weight: 0.1,
            seed: 0,
            seeds_per_sample: 2,
            hops: 4,
            edge_dropout: 0.5,
            points_per_segment: 128,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            seeds: self.seeds_per_sample,
            hops: self.hops,
            edge_dropout: self.edge_dropout,
            points_per_segment: self.points_per_segment,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossValue,
    pub learning_rate: f64,
}

/// Forward, loss and backward on one sample, then an optimizer step.
pub fn train_step(
    spn: &mut Spn,
    state: &mut OptimizerState,
    sample: &TrainingSample,
    config: &TrainConfig,
) -> Result<(LossValue, f64), TrainError> {
    let mut tape = Tape::new();
    let out = spn.forward_batch(&mut tape, &sample.batch)?;
    let (loss, value) = joint_loss(
        &mut tape,
        &out,
        &sample.node_labels,
        &sample.edge_labels,
        config.predicate_weight,
    )?;
    tape.check().map_err(SpnError::from)?;
    let grads = tape.backward(loss);
    let lr = step(
        &mut spn.params,
        &grads,
        state,
        &config.optimizer,
        sample.batch.edges.len(),
    );
    Ok((value, lr))
}

/// Trains `spn` in place; `on_epoch` sees the mean loss of every epoch.
pub fn train(
    spn: &mut Spn,
    state: &mut OptimizerState,
    graphs: &[LabeledGraph],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>, TrainError> {
    if graphs.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sampling = config.sampling();
    let channels = spn.config.channels;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossValue::default();
        let mut lr_sum = 0.0;
        let mut steps = 0usize;
        for &g in &order {
            for _ in 0..config.samples_per_scene.max(1) {
                let sample = sample_training_subgraph(&graphs[g], &sampling, channels, &mut rng)?;
                if sample.batch.nodes.is_empty() {
                    continue;
                }
                let (v, lr) = train_step(spn, state, &sample, config)?;
                sum.total += v.total;
                sum.object += v.object;
                sum.predicate += v.predicate;
                lr_sum += lr;
                steps += 1;
            }
        }
        let n = steps.max(1) as f64;
        let stats = EpochStats {
            epoch,
            loss: LossValue {
                total: sum.total / n,
                object: sum.object / n,
                predicate: sum.predicate / n,
            },
            learning_rate: lr_sum / n,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

pub fn write_loss_csv(path: &Path, history: &[EpochStats]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,loss,object_loss,predicate_loss,learning_rate")?;
    for s in history {
        writeln!(
            f,
            "{},{},{},{},{}",
            s.epoch, s.loss.total, s.loss.object, s.loss.predicate, s.learning_rate
        )?;
    }
    f.flush()
}

/// Accuracy of the arg-max predictions of a full forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accuracy {
    pub node_correct: usize,
    pub node_total: usize,
    pub edge_correct: usize,
    pub edge_total: usize,
}

impl Accuracy {
    pub fn node(&self) -> f64 {
        ratio(self.node_correct, self.node_total)
    }

    pub fn edge(&self) -> f64 {
        ratio(self.edge_correct, self.edge_total)
    }

    pub fn add(&mut self, other: &Accuracy) {
        self.node_correct += other.node_correct;
        self.node_total += other.node_total;
        self.edge_correct += other.edge_correct;
        self.edge_total += other.edge_total;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Compares arg-max predictions on `sample` with its labels.
pub fn accuracy(spn: &Spn, sample: &TrainingSample) -> Result<Accuracy, SpnError> {
    let mut tape = Tape::new();
    let out = spn.forward_batch(&mut tape, &sample.batch)?;
    let mut acc = Accuracy::default();
    for (row, label) in tape.value(out.node_logits).rows().into_iter().zip(&sample.node_labels) {
        if let Some(l) = label {
            acc.node_total += 1;
            acc.node_correct += usize::from(argmax(row.as_slice().expect("row-major")) == *l);
        }
    }
    for (row, label) in tape.value(out.edge_logits).rows().into_iter().zip(&sample.edge_labels) {
        if let Some(l) = label {
            acc.edge_total += 1;
            acc.edge_correct += usize::from(argmax(row.as_slice().expect("row-major")) == *l);
        }
    }
    Ok(acc)
}

/// Most frequent label over all labelled nodes and edges (ties to the
/// lower index).
pub fn majority_labels(graphs: &[LabeledGraph], classes: usize, predicates: usize) -> (usize, usize) {
    let mut nodes = vec![0usize; classes];
    let mut edges = vec![0usize; predicates];
    for g in graphs {
        for s in g.segments.values() {
            if let Some(l) = s.label {
                nodes[l] += 1;
            }
        }
        for &l in g.edge_labels.values() {
            edges[l] += 1;
        }
    }
    let top = |c: &[usize]| (0..c.len()).fold(0, |b, i| if c[i] > c[b] { i } else { b });
    (top(&nodes), top(&edges))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_map::recompute_properties;
    use crate::spn::{GraphBatch, NodeInput, PointChannels, SpnConfig};

    fn node(id: u32, offset: f64) -> NodeInput {
        let k = f64::from(id);
        let pts: Vec<Point> = (0..6)
            .map(|i| {
                Point::at([
                    offset + (i % 3) as f64 * 0.2 * k,
                    (i / 3) as f64 * 0.3,
                    0.1 * i as f64 / k,
                ])
            })
            .collect();
        let props = recompute_properties(&pts).unwrap();
        NodeInput::new(SegmentId(id), &pts, props, PointChannels::Xyz).unwrap()
    }

    fn tiny_sample() -> TrainingSample {
        TrainingSample {
            batch: GraphBatch {
                nodes: vec![node(1, 0.0), node(2, 1.0), node(3, 2.5)],
                edges: vec![(0, 1), (1, 0), (1, 2), (2, 1)],
            },
            node_labels: vec![Some(0), Some(2), None],
            edge_labels: vec![Some(1), Some(0), Some(3), None],
        }
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let mut tape = Tape::new();
        let big = ndarray::array![[1e3, 0.0], [0.0, 1e3]];
        let logits = tape.leaf(big.clone());
        let elogits = tape.leaf(big);
        let out = BatchOutput {
            node_layers: vec![],
            edge_layers: vec![],
            node_logits: logits,
            edge_logits: elogits,
        };
        let (_, v) = joint_loss(&mut tape, &out, &[Some(0), Some(1)], &[Some(0), Some(1)], 0.1).unwrap();
        assert!(v.total.abs() < 1e-12);
    }

    #[test]
    fn uniform_twenty_classes_and_empty_edges() {
        let mut tape = Tape::new();
        let logits = tape.leaf(ndarray::Array2::zeros((3, 20)));
        let elogits = tape.leaf(ndarray::Array2::zeros((0, 4)));
        let out = BatchOutput {
            node_layers: vec![],
            edge_layers: vec![],
            node_logits: logits,
            edge_logits: elogits,
        };
        let (_, v) = joint_loss(&mut tape, &out, &[Some(3), Some(19), Some(0)], &[], 0.1).unwrap();
        assert!((v.object - 20f64.ln()).abs() < 1e-12);
        assert!((v.object - 2.9957).abs() < 1e-4);
        assert_eq!(v.predicate, 0.0);
        assert_eq!(v.total, v.object);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let mut tape = Tape::new();
        let logits = tape.leaf(ndarray::Array2::zeros((1, 3)));
        let elogits = tape.leaf(ndarray::Array2::zeros((0, 2)));
        let out = BatchOutput {
            node_layers: vec![],
            edge_layers: vec![],
            node_logits: logits,
            edge_logits: elogits,
        };
        assert!(matches!(
            joint_loss(&mut tape, &out, &[Some(3)], &[], 0.1),
            Err(TrainError::Label { label: 3, size: 3 })
        ));
    }

    #[test]
    fn repeated_steps_halve_the_loss() {
        let mut spn = Spn::new(SpnConfig::desk(3, 4)).unwrap();
        let mut state = OptimizerState::new(&spn.params);
        let sample = tiny_sample();
        let config = TrainConfig::default();
        let (first, _) = train_step(&mut spn, &mut state, &sample, &config).unwrap();
        let mut last = first;
        for _ in 0..200 {
            last = train_step(&mut spn, &mut state, &sample, &config).unwrap().0;
        }
        assert!(last.total <= 0.5 * first.total, "{} -> {}", first.total, last.total);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let run = || {
            let mut spn = Spn::new(SpnConfig::tiny(3, 4)).unwrap();
            let mut state = OptimizerState::new(&spn.params);
            let sample = tiny_sample();
            for _ in 0..5 {
                train_step(&mut spn, &mut state, &sample, &TrainConfig::default()).unwrap();
            }
            spn.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn majority_ties_go_to_lower_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        let mut g = LabeledGraph::default();
        for (i, l) in [Some(2), Some(1), None, Some(2), Some(1)].into_iter().enumerate() {
            g.segments.insert(
                SegmentId(i as u32),
                LabeledSegment {
                    points: vec![],
                    properties: recompute_properties(&[Point::at([0.0; 3])]).unwrap(),
                    label: l,
                },
            );
        }
        assert_eq!(majority_labels(&[g], 3, 2), (1, 0));
    }
}
