//! Scene-level evaluation of a trained network against ground truth.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::labels::{associate, PointIndex, ASSOCIATION_RADIUS};
use crate::datagen::{desk, labeled_graph, replay, DataError, GroundTruth};
use crate::fusion::FusedSceneGraph;
use crate::metrics::{
    label_recall, mean_iou, panoptic_counts, relationship_recall, IouReport, MetricError, PanopticCounts,
    PanopticReport, Recall, TripletItem,
};
use crate::neighbor_graph::{EdgeKey, Topology};
use crate::pipeline::{run_pipeline, PipelineConfig, PipelineError};
use crate::scene_map::{FrameUpdate, SceneMap, SegmentId};
use crate::spn::{Spn, SpnError};
use crate::tape::Tape;
use crate::train::{argmax, LabeledGraph};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Spn(#[from] SpnError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub object_k: Vec<usize>,
    pub predicate_k: Vec<usize>,
    pub relationship_k: Vec<usize>,
    pub points_per_segment: usize,
    /// Share of undirected edges removed before the forward pass.
    pub edge_dropout: f64,
    pub seed: u64,
    /// Run the pipeline on every stream and score its instances.
    pub panoptic: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            object_k: vec![1, 3],
            predicate_k: vec![1, 2],
            relationship_k: vec![1, 10, 50],
            points_per_segment: 128,
            edge_dropout: 0.0,
            seed: 0,
            panoptic: true,
        }
    }
}

/// A stream and its ground truth.
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub frames: Vec<FrameUpdate>,
    pub gt: GroundTruth,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub node_accuracy: f64,
    pub predicate_accuracy: f64,
    pub majority_node_accuracy: f64,
    pub majority_predicate_accuracy: f64,
    /// Keyed `object@k`, `predicate@k` and `relationship@k`.
    pub recall: BTreeMap<String, Recall>,
    /// Class IoU over segments of the final maps.
    pub segment_iou: IouReport,
    /// Class IoU over points, from the fused pipeline labels.
    pub point_iou: Option<IouReport>,
    pub panoptic: Option<PanopticReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut rows = vec![
            ("node_accuracy".to_owned(), self.node_accuracy),
            ("predicate_accuracy".to_owned(), self.predicate_accuracy),
            ("majority_node_accuracy".to_owned(), self.majority_node_accuracy),
            (
                "majority_predicate_accuracy".to_owned(),
                self.majority_predicate_accuracy,
            ),
            ("segment_miou".to_owned(), self.segment_iou.mean),
        ];
        rows.extend(self.recall.iter().map(|(k, r)| (k.clone(), r.value())));
        if let Some(p) = &self.point_iou {
            rows.push(("point_miou".to_owned(), p.mean));
        }
        if let Some(p) = &self.panoptic {
            for (name, q) in [("all", p.all), ("things", p.things), ("stuff", p.stuff)] {
                rows.push((format!("pq_{name}"), q.pq));
                rows.push((format!("sq_{name}"), q.sq));
                rows.push((format!("rq_{name}"), q.rq));
            }
        }
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

/// Node and directed-edge probabilities of one from-scratch pass.
pub type GraphProbabilities = (BTreeMap<SegmentId, Vec<f64>>, BTreeMap<EdgeKey, Vec<f64>>);

/// Removes each undirected edge with probability `p`.
pub fn drop_edges(topology: &Topology, p: f64, rng: &mut impl Rng) -> Topology {
    let mut out = topology.clone();
    for (a, b) in topology.undirected_edges() {
        if rng.gen_bool(p.clamp(0.0, 1.0)) {
            out.remove_edge(a, b);
        }
    }
    out
}

/// Full forward pass over a labelled graph with deterministic inputs.
pub fn predict_graph(
    spn: &Spn,
    graph: &LabeledGraph,
    points_per_segment: usize,
) -> Result<GraphProbabilities, SpnError> {
    let sample = graph.full_sample(points_per_segment, spn.config.channels)?;
    let mut tape = Tape::new();
    let out = spn.forward_batch(&mut tape, &sample.batch)?;
    let nodes = sample
        .batch
        .nodes
        .iter()
        .zip(tape.value(out.node_logits).rows())
        .map(|(n, row)| (n.id, Spn::probabilities(&row.to_vec())))
        .collect();
    let edges = sample
        .batch
        .edge_keys()
        .into_iter()
        .zip(tape.value(out.edge_logits).rows())
        .map(|(k, row)| (k, Spn::probabilities(&row.to_vec())))
        .collect();
    Ok((nodes, edges))
}

/// Per-point `(instance, class)` labels of the fused graph and of the
/// ground truth over all points of `map`; ground-truth `None` is void.
#[allow(clippy::type_complexity)]
pub fn panoptic_labels(
    map: &SceneMap,
    fused: &FusedSceneGraph,
    gt: &GroundTruth,
) -> (Vec<Option<(u64, usize)>>, Vec<Option<(u64, usize)>>) {
    let partition = fused.cluster_instances();
    let index = PointIndex::new(gt, ASSOCIATION_RADIUS);
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for seg in map.segments() {
        let label = partition
            .instance_of
            .get(&seg.id)
            .map(|root| (u64::from(root.0), partition.instances[root].1));
        for a in associate(seg.points(), &index) {
            pred.push(label);
            truth.push(a.and_then(|(inst, _)| gt.class_of(inst).map(|c| (u64::from(inst), c))));
        }
    }
    (pred, truth)
}

/// Subject, object and predicate probabilities with the true triplet.
type ScoredTriplet = (Vec<f64>, Vec<f64>, Vec<f64>, (usize, usize, usize));

fn majority(counts: &[usize]) -> usize {
    (0..counts.len()).fold(0, |b, i| if counts[i] > counts[b] { i } else { b })
}

/// Evaluates `spn` on `scenes`. `baseline` gives the majority class and
/// predicate to compare against; when absent they come from the evaluated
/// scenes themselves.
pub fn evaluate(
    spn: Arc<Spn>,
    scenes: &[EvalScene],
    baseline: Option<(usize, usize)>,
    config: &EvalConfig,
    pipeline: &PipelineConfig,
) -> Result<EvalReport, EvalError> {
    let classes = spn.config.num_classes;
    let predicates = spn.config.num_predicates;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut node_pairs: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut edge_pairs: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut triplets: Vec<ScoredTriplet> = Vec::new();
    let (mut seg_pred, mut seg_gt) = (Vec::new(), Vec::new());
    let (mut point_pred, mut point_gt) = (Vec::new(), Vec::new());
    let mut counts = PanopticCounts::default();
    let mut node_counts = vec![0usize; classes];
    let mut edge_counts = vec![0usize; predicates];

    for scene in scenes {
        let map = replay(&scene.frames)?;
        let mut graph = labeled_graph(
            &map,
            &scene.gt,
            pipeline.graph.min_segment_points,
            pipeline.graph.proximity_threshold,
        );
        if config.edge_dropout > 0.0 {
            graph.topology = drop_edges(&graph.topology, config.edge_dropout, &mut rng);
        }
        let (nodes, edges) = predict_graph(&spn, &graph, config.points_per_segment)?;
        for (id, seg) in &graph.segments {
            let p = &nodes[id];
            seg_pred.push(Some(argmax(p)));
            seg_gt.push(seg.label);
            if let Some(l) = seg.label {
                node_counts[l] += 1;
                node_pairs.push((l, p.clone()));
            }
        }
        for (key, p) in &edges {
            let Some(&l) = graph.edge_labels.get(key) else { continue };
            edge_counts[l] += 1;
            edge_pairs.push((l, p.clone()));
            let (sl, ol) = (graph.segments[&key.0].label, graph.segments[&key.1].label);
            if let (Some(sl), Some(ol)) = (sl, ol) {
                if l != desk::NONE {
                    triplets.push((nodes[&key.0].clone(), nodes[&key.1].clone(), p.clone(), (sl, ol, l)));
                }
            }
        }
        if config.panoptic {
            let out = run_pipeline(&scene.frames, spn.clone(), pipeline)?;
            let (p, g) = panoptic_labels(&out.map, &out.fused, &scene.gt);
            counts.add(panoptic_counts(&p, &g, classes, &scene.gt.stuff)?);
            point_pred.extend(p.iter().map(|l| l.map(|x| x.1)));
            point_gt.extend(g.iter().map(|l| l.map(|x| x.1)));
        }
    }

    let (mc, mp) = baseline.unwrap_or((majority(&node_counts), majority(&edge_counts)));
    let frac = |hit: usize, n: usize| if n == 0 { 0.0 } else { hit as f64 / n as f64 };
    let node_hits = node_pairs.iter().filter(|(l, p)| argmax(p) == *l).count();
    let edge_hits = edge_pairs.iter().filter(|(l, p)| argmax(p) == *l).count();

    let mut recall = BTreeMap::new();
    for &k in &config.object_k {
        let r = label_recall(node_pairs.iter().map(|(l, p)| (&p[..], *l)), k)?;
        recall.insert(format!("object@{k}"), r);
    }
    for &k in &config.predicate_k {
        let items = edge_pairs
            .iter()
            .filter(|(l, _)| *l != desk::NONE)
            .map(|(l, p)| (&p[..], *l));
        recall.insert(format!("predicate@{k}"), label_recall(items, k)?);
    }
    for &k in &config.relationship_k {
        let items = triplets.iter().map(|(s, o, p, gt)| TripletItem {
            subject: s,
            object: o,
            predicate: p,
            gt: *gt,
        });
        recall.insert(format!("relationship@{k}"), relationship_recall(items, k)?);
    }

    let (point_iou, panoptic) = if config.panoptic {
        let stuff = scenes.first().map(|s| s.gt.stuff.clone()).unwrap_or_default();
        (
            Some(mean_iou(&point_pred, &point_gt, classes)?),
            Some(counts.report(&stuff)),
        )
    } else {
        (None, None)
    };

    Ok(EvalReport {
        scenes: scenes.len(),
        node_accuracy: frac(node_hits, node_pairs.len()),
        predicate_accuracy: frac(edge_hits, edge_pairs.len()),
        majority_node_accuracy: frac(node_pairs.iter().filter(|(l, _)| *l == mc).count(), node_pairs.len()),
        majority_predicate_accuracy: frac(edge_pairs.iter().filter(|(l, _)| *l == mp).count(), edge_pairs.len()),
        recall,
        segment_iou: mean_iou(&seg_pred, &seg_gt, classes)?,
        point_iou,
        panoptic,
    })
}
