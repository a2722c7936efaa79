//! Recall@k, IoU and panoptic quality.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_map::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("label arrays differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("label {label} outside a distribution of {size}")]
    Label { label: usize, size: usize },
}

/// 1-based rank of `label` in `probs`; equal scores rank by ascending index.
pub fn rank_of(probs: &[f64], label: usize) -> usize {
    let p = probs[label];
    1 + probs
        .iter()
        .enumerate()
        .filter(|&(i, &q)| q > p || (q == p && i < label))
        .count()
}

/// 1-based rank of the triplet `(s, o, p)` among all subject × object ×
/// predicate combinations scored by the product of their probabilities;
/// equal scores rank by ascending `(s, o, p)`.
pub fn triplet_rank(subject: &[f64], object: &[f64], predicate: &[f64], gt: (usize, usize, usize)) -> usize {
    let target = subject[gt.0] * object[gt.1] * predicate[gt.2];
    let mut rank = 1;
    for (s, ps) in subject.iter().enumerate() {
        for (o, po) in object.iter().enumerate() {
            for (p, pp) in predicate.iter().enumerate() {
                let score = ps * po * pp;
                if score > target || (score == target && (s, o, p) < gt) {
                    rank += 1;
                }
            }
        }
    }
    rank
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub hits: usize,
    pub total: usize,
}

impl Recall {
    /// Fraction of hits; zero when nothing was evaluated.
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

fn check(probs: &[f64], label: usize) -> Result<(), MetricError> {
    if label >= probs.len() {
        Err(MetricError::Label {
            label,
            size: probs.len(),
        })
    } else {
        Ok(())
    }
}

/// Share of `(distribution, true label)` items whose label ranks within
/// the top `k`. Used for both object and predicate recall.
pub fn label_recall<'a>(items: impl IntoIterator<Item = (&'a [f64], usize)>, k: usize) -> Result<Recall, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    let mut r = Recall::default();
    for (probs, label) in items {
        check(probs, label)?;
        r.total += 1;
        r.hits += usize::from(rank_of(probs, label) <= k);
    }
    Ok(r)
}

/// One ground-truth relationship and the predicted distributions of its
/// subject, object and edge.
#[derive(Clone, Copy, Debug)]
pub struct TripletItem<'a> {
    pub subject: &'a [f64],
    pub object: &'a [f64],
    pub predicate: &'a [f64],
    pub gt: (usize, usize, usize),
}

pub fn relationship_recall<'a>(
    items: impl IntoIterator<Item = TripletItem<'a>>,
    k: usize,
) -> Result<Recall, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    let mut r = Recall::default();
    for t in items {
        check(t.subject, t.gt.0)?;
        check(t.object, t.gt.1)?;
        check(t.predicate, t.gt.2)?;
        r.total += 1;
        r.hits += usize::from(triplet_rank(t.subject, t.object, t.predicate, t.gt) <= k);
    }
    Ok(r)
}

/// Per-class intersection over union and their mean over the classes
/// present in the ground truth. `None` entries (void or missing points)
/// are skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn class_iou(pred: &[Option<usize>], gt: &[Option<usize>], class: usize) -> Result<Option<f64>, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Length(pred.len(), gt.len()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let (Some(p), Some(g)) = (p, g) else { continue };
        let (ip, ig) = (*p == class, *g == class);
        inter += usize::from(ip && ig);
        union += usize::from(ip || ig);
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

pub fn mean_iou(pred: &[Option<usize>], gt: &[Option<usize>], num_classes: usize) -> Result<IouReport, MetricError> {
    let mut per_class = Vec::with_capacity(num_classes);
    let mut sum = 0.0;
    let mut n = 0;
    for c in 0..num_classes {
        let v = class_iou(pred, gt, c)?;
        let present = pred.iter().zip(gt).any(|(p, g)| p.is_some() && *g == Some(c));
        if present {
            sum += v.unwrap_or(0.0);
            n += 1;
        }
        per_class.push(v);
    }
    Ok(IouReport {
        per_class,
        mean: if n == 0 { 0.0 } else { sum / n as f64 },
    })
}

/// Labels of the nearest reconstructed point for every ground-truth point
/// (the nearest-neighbor mode for points missing from a reconstruction).
pub fn nearest_labels(gt_points: &[Vec3], recon_points: &[Vec3], recon_labels: &[Option<usize>]) -> Vec<Option<usize>> {
    if recon_points.is_empty() {
        return vec![None; gt_points.len()];
    }
    let cell = 0.1;
    let key = |p: Vec3| p.map(|v| (v / cell).floor() as i64);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in recon_points.iter().enumerate() {
        grid.entry(key(*p)).or_default().push(i);
    }
    let d2 = |a: Vec3, b: Vec3| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    gt_points
        .iter()
        .map(|&q| {
            let c = key(q);
            let mut best: Option<(f64, usize)> = None;
            let mut ring = 0i64;
            loop {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            for &i in grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]).into_iter().flatten() {
                                let d = d2(q, recon_points[i]);
                                if best.is_none_or(|(bd, bi)| d < bd || (d == bd && i < bi)) {
                                    best = Some((d, i));
                                }
                            }
                        }
                    }
                }
                // every unvisited cell is at least `ring` cells away
                if let Some((bd, _)) = best {
                    if bd.sqrt() <= ring as f64 * cell {
                        break;
                    }
                }
                ring += 1;
            }
            recon_labels[best.expect("non-empty reconstruction").1]
        })
        .collect()
}

/// Quality figures of one class or an aggregate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassQuality {
    pub class: usize,
    pub tp: usize,
    pub fp: usize,
    pub false_negatives: usize,
    pub iou_sum: f64,
    pub quality: Quality,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PanopticReport {
    pub per_class: Vec<ClassQuality>,
    pub all: Quality,
    pub things: Quality,
    pub stuff: Quality,
    /// Matched `(predicted segment, ground-truth segment, IoU)` triples.
    pub matches: Vec<(u64, u64, f64)>,
}

/// Mean PQ and RQ over the classes; SQ is their ratio so the aggregate
/// also satisfies PQ = SQ · RQ.
fn aggregate<'a>(classes: impl IntoIterator<Item = &'a ClassQuality>) -> Quality {
    let (mut pq, mut rq, mut n) = (0.0, 0.0, 0);
    for c in classes {
        pq += c.quality.pq;
        rq += c.quality.rq;
        n += 1;
    }
    if n == 0 || rq == 0.0 {
        return Quality::default();
    }
    let (pq, rq) = (pq / n as f64, rq / n as f64);
    let sq = pq / rq;
    Quality { pq: sq * rq, sq, rq }
}

/// Matching counts of one or more labellings, before the quality figures
/// are derived.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PanopticCounts {
    pub per_class: Vec<ClassQuality>,
    pub matches: Vec<(u64, u64, f64)>,
}

impl PanopticCounts {
    /// Adds the counts of another scene.
    pub fn add(&mut self, other: PanopticCounts) {
        if self.per_class.len() < other.per_class.len() {
            let start = self.per_class.len();
            self.per_class
                .extend((start..other.per_class.len()).map(|class| ClassQuality {
                    class,
                    ..Default::default()
                }));
        }
        for (a, b) in self.per_class.iter_mut().zip(other.per_class) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.false_negatives += b.false_negatives;
            a.iou_sum += b.iou_sum;
        }
        self.matches.extend(other.matches);
    }

    /// Per-class and aggregate quality over the classes that occur.
    pub fn report(self, stuff: &[usize]) -> PanopticReport {
        let mut per_class: Vec<ClassQuality> = self
            .per_class
            .into_iter()
            .filter(|s| s.tp + s.fp + s.false_negatives > 0)
            .collect();
        for s in &mut per_class {
            let denom = s.tp as f64 + 0.5 * s.fp as f64 + 0.5 * s.false_negatives as f64;
            let sq = if s.tp > 0 { s.iou_sum / s.tp as f64 } else { 0.0 };
            let rq = s.tp as f64 / denom;
            s.quality = Quality { pq: sq * rq, sq, rq };
        }
        PanopticReport {
            all: aggregate(&per_class),
            things: aggregate(per_class.iter().filter(|c| !stuff.contains(&c.class))),
            stuff: aggregate(per_class.iter().filter(|c| stuff.contains(&c.class))),
            per_class,
            matches: self.matches,
        }
    }
}

type SegmentKey = (u64, usize);

/// Matches the segments of one scene: same class and IoU above 0.5.
/// Points without a ground-truth label are void and ignored; points
/// without a prediction count only towards their ground-truth segment.
/// Stuff classes collapse to one segment per class on both sides.
pub fn panoptic_counts(
    pred: &[Option<(u64, usize)>],
    gt: &[Option<(u64, usize)>],
    num_classes: usize,
    stuff: &[usize],
) -> Result<PanopticCounts, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Length(pred.len(), gt.len()));
    }
    let canon = |l: (u64, usize)| {
        if stuff.contains(&l.1) {
            (u64::MAX - l.1 as u64, l.1)
        } else {
            l
        }
    };
    let mut pred_area: BTreeMap<SegmentKey, usize> = BTreeMap::new();
    let mut gt_area: BTreeMap<SegmentKey, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(SegmentKey, SegmentKey), usize> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt) {
        let Some(g) = g.map(canon) else { continue };
        if g.1 >= num_classes {
            return Err(MetricError::Label {
                label: g.1,
                size: num_classes,
            });
        }
        *gt_area.entry(g).or_default() += 1;
        if let Some(p) = p.map(canon) {
            *pred_area.entry(p).or_default() += 1;
            if p.1 == g.1 {
                *inter.entry((p, g)).or_default() += 1;
            }
        }
    }
    let mut per_class: Vec<ClassQuality> = (0..num_classes)
        .map(|class| ClassQuality {
            class,
            ..Default::default()
        })
        .collect();
    let mut matched_pred = BTreeSet::new();
    let mut matched_gt = BTreeSet::new();
    let mut matches = Vec::new();
    for (&(p, g), &i) in &inter {
        let iou = i as f64 / (pred_area[&p] + gt_area[&g] - i) as f64;
        if iou > 0.5 {
            assert!(matched_pred.insert(p), "a predicted segment matched twice");
            assert!(matched_gt.insert(g), "a ground-truth segment matched twice");
            per_class[g.1].tp += 1;
            per_class[g.1].iou_sum += iou;
            matches.push((p.0, g.0, iou));
        }
    }
    for p in pred_area.keys().filter(|p| !matched_pred.contains(*p)) {
        if p.1 < num_classes {
            per_class[p.1].fp += 1;
        }
    }
    for g in gt_area.keys().filter(|g| !matched_gt.contains(*g)) {
        per_class[g.1].false_negatives += 1;
    }
    Ok(PanopticCounts { per_class, matches })
}

/// Panoptic quality of one scene's per-point `(segment id, class)`
/// labellings; see [`panoptic_counts`].
pub fn panoptic_quality(
    pred: &[Option<(u64, usize)>],
    gt: &[Option<(u64, usize)>],
    num_classes: usize,
    stuff: &[usize],
) -> Result<PanopticReport, MetricError> {
    Ok(panoptic_counts(pred, gt, num_classes, stuff)?.report(stuff))
}

impl PanopticReport {
    /// One row per evaluated class.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,name,pq,sq,rq,tp,fp,fn\n");
        for c in &self.per_class {
            let name = class_names.get(c.class).map(String::as_str).unwrap_or("");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.class, name, c.quality.pq, c.quality.sq, c.quality.rq, c.tp, c.fp, c.false_negatives
            ));
        }
        out
    }
}
