#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgf_core::datagen::{generate_scene, random_room, GeneratedScene, RoomConfig, Vocabulary};
use sgf_core::neighbor_graph::{FrozenSegment, Topology};
use sgf_core::scene_map::{recompute_properties, FrameUpdate, Point, SegmentId};
use sgf_core::spn::{NodeInput, PointChannels};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Points scattered in a box of half-width `spread` around `center`.
pub fn cloud(rng: &mut impl Rng, n: usize, center: [f64; 3], spread: f64) -> Vec<Point> {
    (0..n)
        .map(|_| {
            let mut p = Point::at([0.0; 3].map(|_| rng.gen_range(-spread..spread)));
            for (x, c) in p.position.iter_mut().zip(center) {
                *x += c;
            }
            p.color = [rng.gen(), rng.gen(), rng.gen()];
            p
        })
        .collect()
}

pub fn frozen(id: SegmentId, points: Vec<Point>) -> FrozenSegment {
    FrozenSegment {
        id,
        size: points.len(),
        properties: recompute_properties(&points).unwrap(),
        points,
    }
}

pub fn node_input(id: SegmentId, points: &[Point]) -> NodeInput {
    NodeInput::new(id, points, recompute_properties(points).unwrap(), PointChannels::Xyz).unwrap()
}

/// Random graph on ids `1..=n` whose segments sit near each other, with
/// each undirected edge present with probability `p`.
pub fn random_graph(rng: &mut impl Rng, n: usize, p: f64, points: usize) -> (BTreeMap<SegmentId, NodeInput>, Topology) {
    let ids: Vec<SegmentId> = (1..=n as u32).map(SegmentId).collect();
    let inputs = ids
        .iter()
        .map(|&id| {
            let center = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.0..1.0),
            ];
            let spread = rng.gen_range(0.05..0.6);
            (id, node_input(id, &cloud(rng, points, center, spread)))
        })
        .collect();
    let mut edges = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            if rng.gen_bool(p) {
                edges.push((a, b));
            }
        }
    }
    (inputs, Topology::from_edges(ids.iter().copied(), edges))
}

/// A random stream of `ops` frames, each doing one thing: adding points
/// to a new or live segment, merging two live segments or removing one.
pub fn random_stream(rng: &mut impl Rng, ops: usize) -> Vec<FrameUpdate> {
    let mut live: BTreeSet<SegmentId> = BTreeSet::new();
    let mut next = 1u32;
    let mut out = Vec::with_capacity(ops);
    for frame in 1..=ops as u64 {
        let mut f = FrameUpdate {
            frame,
            ..Default::default()
        };
        let roll: f64 = rng.gen();
        let pool: Vec<SegmentId> = live.iter().copied().collect();
        if roll < 0.15 && pool.len() >= 2 {
            let pair: Vec<_> = pool.choose_multiple(rng, 2).copied().collect();
            f.merges.push((pair[0], pair[1]));
            live.remove(&pair[0]);
        } else if roll < 0.22 && !pool.is_empty() {
            let id = *pool.choose(rng).unwrap();
            f.removals.push(id);
            live.remove(&id);
        } else {
            let id = if pool.is_empty() || rng.gen_bool(0.3) {
                next += 1;
                SegmentId(next - 1)
            } else {
                *pool.choose(rng).unwrap()
            };
            let center = [0.0; 3].map(|_| rng.gen_range(-100.0..100.0));
            let n = rng.gen_range(1..=20);
            let spread = rng.gen_range(0.01..3.0);
            f.additions.insert(id, cloud(rng, n, center, spread));
            live.insert(id);
        }
        out.push(f);
    }
    out
}

/// `n` furnished rooms drawn from one seed.
pub fn rooms(seed: u64, n: usize) -> Vec<GeneratedScene> {
    let vocab = Vocabulary::desk();
    let mut rng = rng(seed);
    (0..n)
        .map(|_| {
            let spec = random_room(&RoomConfig::default(), &mut rng);
            generate_scene(&spec, &vocab, &mut rng).unwrap()
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

use sgf_core::neighbor_graph::{FeatureCache, SubgraphSnapshot, TopologyChange};
use sgf_core::spn::{GraphBatch, Spn};
use sgf_core::tape::Tape;
use sgf_core::train::{joint_loss, TrainingSample};

/// Snapshot introducing every node and edge of a graph.
pub fn initial_snapshot(segments: &BTreeMap<SegmentId, Vec<Point>>, topology: &Topology) -> SubgraphSnapshot {
    SubgraphSnapshot {
        frame: 1,
        nodes: segments.keys().copied().collect(),
        edges: topology.undirected_edges().into_iter().collect(),
        fresh: segments.iter().map(|(&id, p)| frozen(id, p.clone())).collect(),
        changes: topology
            .undirected_edges()
            .into_iter()
            .map(|(a, b)| TopologyChange::EdgeAdded(a, b))
            .collect(),
    }
}

/// A single-node update: new points for one segment and a random rewiring
/// of its edges. Occasionally the node is removed or, below `max_nodes`,
/// a new one appears.
pub fn random_update(
    rng: &mut impl Rng,
    frame: u64,
    segments: &mut BTreeMap<SegmentId, Vec<Point>>,
    topology: &mut Topology,
    points: usize,
    max_nodes: usize,
) -> SubgraphSnapshot {
    let ids: Vec<SegmentId> = segments.keys().copied().collect();
    let mut snap = SubgraphSnapshot {
        frame,
        ..Default::default()
    };
    let roll: f64 = rng.gen();
    if roll < 0.1 && ids.len() > 3 {
        let id = *ids.choose(rng).unwrap();
        segments.remove(&id);
        topology.remove_node(id);
        snap.changes.push(TopologyChange::NodeRemoved(id));
        return snap;
    }
    let id = if roll < 0.2 && ids.len() < max_nodes {
        SegmentId(ids.iter().map(|i| i.0).max().unwrap_or(0) + 1)
    } else {
        *ids.choose(rng).unwrap()
    };
    let center = [
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
        rng.gen_range(0.0..1.0),
    ];
    let spread = rng.gen_range(0.05..0.6);
    let pts = cloud(rng, points, center, spread);
    segments.insert(id, pts.clone());
    topology.add_node(id);
    snap.fresh.push(frozen(id, pts));
    snap.nodes.insert(id);
    for &other in &ids {
        if other == id || !rng.gen_bool(0.3) {
            continue;
        }
        if topology.has_edge(id, other) {
            topology.remove_edge(id, other);
            snap.changes.push(TopologyChange::EdgeRemoved(id, other));
        } else {
            topology.add_edge(id, other);
            snap.changes.push(TopologyChange::EdgeAdded(id, other));
        }
    }
    snap
}

/// Largest absolute difference between two caches; infinite when their
/// key sets differ.
pub fn cache_diff(a: &FeatureCache, b: &FeatureCache) -> f64 {
    fn maps<K: Ord>(x: &BTreeMap<K, Vec<f64>>, y: &BTreeMap<K, Vec<f64>>) -> f64 {
        if !x.keys().eq(y.keys()) {
            return f64::INFINITY;
        }
        x.values()
            .zip(y.values())
            .map(|(u, v)| max_abs_diff(u, v))
            .fold(0.0, f64::max)
    }
    if a.layers() != b.layers() {
        return f64::INFINITY;
    }
    let mut d = maps(&a.node_logits, &b.node_logits).max(maps(&a.edge_logits, &b.edge_logits));
    for l in 0..=a.layers() {
        d = d
            .max(maps(&a.nodes[l], &b.nodes[l]))
            .max(maps(&a.edges[l], &b.edges[l]));
    }
    d
}

/// Random training sample over `random_graph` with random labels.
pub fn random_sample(rng: &mut impl Rng, n: usize, classes: usize, predicates: usize) -> TrainingSample {
    let (inputs, topology) = random_graph(rng, n, 0.5, 8);
    let batch = GraphBatch::from_topology(&inputs, &topology);
    let node_labels = (0..batch.nodes.len())
        .map(|_| rng.gen_bool(0.9).then(|| rng.gen_range(0..classes)))
        .collect();
    let edge_labels = (0..batch.edges.len())
        .map(|_| Some(rng.gen_range(0..predicates)))
        .collect();
    TrainingSample {
        batch,
        node_labels,
        edge_labels,
    }
}

/// Moves every bias off its zero initialization so that no ReLU input
/// sits exactly on the kink.
pub fn jitter_biases(spn: &mut Spn, rng: &mut impl Rng) {
    let ids: Vec<_> = spn
        .params
        .ids()
        .filter(|&id| spn.params.name(id).ends_with("bias"))
        .collect();
    for id in ids {
        spn.params.get_mut(id).mapv_inplace(|_| rng.gen_range(-0.1..0.1));
    }
}

fn loss_value(spn: &Spn, sample: &TrainingSample) -> f64 {
    let mut tape = Tape::new();
    let out = spn.forward_batch(&mut tape, &sample.batch).unwrap();
    joint_loss(&mut tape, &out, &sample.node_labels, &sample.edge_labels, 0.1)
        .unwrap()
        .1
        .total
}

/// Relative error of the analytic gradient of every parameter tensor
/// against central differences with step `h`:
/// `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)`, taken as zero when both norms are below
/// `1e-10`.
pub fn gradient_errors(spn: &mut Spn, sample: &TrainingSample, h: f64) -> Vec<(String, f64)> {
    let mut tape = Tape::new();
    let out = spn.forward_batch(&mut tape, &sample.batch).unwrap();
    let (loss, _) = joint_loss(&mut tape, &out, &sample.node_labels, &sample.edge_labels, 0.1).unwrap();
    let grads = tape.backward(loss);
    let ids: Vec<_> = spn.params.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let shape = spn.params.get(id).dim();
        let analytic = grads.get(&id).cloned();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = spn.params.get(id)[[r, c]];
                spn.params.get_mut(id)[[r, c]] = orig + h;
                let up = loss_value(spn, sample);
                spn.params.get_mut(id)[[r, c]] = orig - h;
                let down = loss_value(spn, sample);
                spn.params.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.as_ref().map_or(0.0, |g| g[[r, c]]);
                diff += (a - numeric).powi(2);
                na += a * a;
                nn += numeric * numeric;
            }
        }
        let (diff, na, nn) = (diff.sqrt(), na.sqrt(), nn.sqrt());
        let rel = if na.max(nn) < 1e-10 { 0.0 } else { diff / na.max(nn) };
        out.push((spn.params.name(id).to_owned(), rel));
    }
    out
}

/// Subject, object and predicate distributions with the true triplet.
pub type ScoredTriplet = (Vec<f64>, Vec<f64>, Vec<f64>, (usize, usize, usize));

/// Random probability vector of length `n`.
pub fn distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

pub mod oracle {
    use std::collections::{BTreeMap, BTreeSet};

    /// Top-k membership by full sort, ties broken by ascending index.
    pub fn in_top_k(probs: &[f64], label: usize, k: usize) -> bool {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        order.iter().take(k).any(|&i| i == label)
    }

    /// Position of `gt` among all triplets sorted by product score.
    pub fn triplet_in_top_k(s: &[f64], o: &[f64], p: &[f64], gt: (usize, usize, usize), k: usize) -> bool {
        let mut all = Vec::new();
        for (i, ps) in s.iter().enumerate() {
            for (j, po) in o.iter().enumerate() {
                for (q, pp) in p.iter().enumerate() {
                    all.push((ps * po * pp, (i, j, q)));
                }
            }
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        all.iter().take(k).any(|x| x.1 == gt)
    }

    /// Class IoU from explicit point sets.
    pub fn class_iou(pred: &[Option<usize>], gt: &[Option<usize>], class: usize) -> Option<f64> {
        let valid = |i: &usize| pred[*i].is_some() && gt[*i].is_some();
        let p: BTreeSet<usize> = (0..pred.len())
            .filter(valid)
            .filter(|&i| pred[i] == Some(class))
            .collect();
        let g: BTreeSet<usize> = (0..gt.len()).filter(valid).filter(|&i| gt[i] == Some(class)).collect();
        let union = p.union(&g).count();
        (union > 0).then(|| p.intersection(&g).count() as f64 / union as f64)
    }

    /// Per-class `(sum of matched IoU, tp, fp, fn)` over one scene by
    /// pairwise comparison of point sets.
    pub fn panoptic_counts(
        pred: &[Option<(u64, usize)>],
        gt: &[Option<(u64, usize)>],
        stuff: &[usize],
    ) -> BTreeMap<usize, (f64, usize, usize, usize)> {
        let key = |l: (u64, usize)| {
            if stuff.contains(&l.1) {
                (None, l.1)
            } else {
                (Some(l.0), l.1)
            }
        };
        let mut ps: BTreeMap<(Option<u64>, usize), BTreeSet<usize>> = BTreeMap::new();
        let mut gs: BTreeMap<(Option<u64>, usize), BTreeSet<usize>> = BTreeMap::new();
        for i in 0..gt.len() {
            let Some(g) = gt[i] else { continue };
            gs.entry(key(g)).or_default().insert(i);
            if let Some(p) = pred[i] {
                ps.entry(key(p)).or_default().insert(i);
            }
        }
        let mut out: BTreeMap<usize, (f64, usize, usize, usize)> = BTreeMap::new();
        let mut pm = BTreeSet::new();
        let mut gm = BTreeSet::new();
        for (pk, p) in &ps {
            for (gk, g) in &gs {
                if pk.1 != gk.1 {
                    continue;
                }
                let iou = p.intersection(g).count() as f64 / p.union(g).count() as f64;
                if iou > 0.5 {
                    let e = out.entry(gk.1).or_default();
                    e.0 += iou;
                    e.1 += 1;
                    pm.insert(*pk);
                    gm.insert(*gk);
                }
            }
        }
        for pk in ps.keys().filter(|k| !pm.contains(k)) {
            out.entry(pk.1).or_default().2 += 1;
        }
        for gk in gs.keys().filter(|k| !gm.contains(k)) {
            out.entry(gk.1).or_default().3 += 1;
        }
        out
    }

    /// Mean per-class PQ over classes that occur, from summed counts.
    pub fn mean_pq(counts: &BTreeMap<usize, (f64, usize, usize, usize)>) -> f64 {
        if counts.is_empty() {
            return 0.0;
        }
        let total: f64 = counts
            .values()
            .map(|&(iou, tp, fp, fne)| iou / (tp as f64 + 0.5 * fp as f64 + 0.5 * fne as f64))
            .sum();
        total / counts.len() as f64
    }
}

/// A random panoptic scene: up to `instances` ground-truth segments over
/// `points` points and a noisy prediction of it. Class 0 is stuff.
#[allow(clippy::type_complexity)]
pub fn random_panoptic(
    rng: &mut impl Rng,
    points: usize,
    instances: u64,
    classes: usize,
) -> (Vec<Option<(u64, usize)>>, Vec<Option<(u64, usize)>>) {
    let class_of: Vec<usize> = (0..instances).map(|_| rng.gen_range(0..classes)).collect();
    let gt: Vec<Option<(u64, usize)>> = (0..points)
        .map(|_| {
            rng.gen_bool(0.9).then(|| {
                let i = rng.gen_range(0..instances);
                (i, class_of[i as usize])
            })
        })
        .collect();
    let pred = gt
        .iter()
        .map(|g| match (g, rng.gen_range(0..10)) {
            (_, 0) => None,
            (_, 1) => Some((rng.gen_range(0..instances + 2), rng.gen_range(0..classes))),
            (Some((i, c)), _) => Some((*i + 100, *c)),
            (None, _) => Some((rng.gen_range(0..instances), rng.gen_range(0..classes))),
        })
        .collect();
    (pred, gt)
}
