//! Ground truth, point association and segment labelling.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::desk::{NONE, SAME_PART};
use crate::neighbor_graph::{EdgeKey, Topology};
use crate::scene_map::{Point, SegmentId, Vec3};

/// Radius within which a reconstructed point is associated with a
/// ground-truth point.
pub const ASSOCIATION_RADIUS: f64 = 0.02;
/// Minimum share of a segment's points on its best instance.
pub const MIN_INTERSECTION: f64 = 0.5;
/// Maximum share of any other instance a matched segment may cover.
pub const MAX_OTHER_COVERAGE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub id: u32,
    pub class: usize,
    pub points: Vec<Vec3>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtRelation {
    pub subject: u32,
    pub object: u32,
    pub predicate: usize,
}

/// Ground-truth sidecar of a stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub classes: Vec<String>,
    pub predicates: Vec<String>,
    /// Class indices evaluated as stuff.
    pub stuff: Vec<usize>,
    pub instances: Vec<GtInstance>,
    pub relations: Vec<GtRelation>,
}

impl GroundTruth {
    pub fn class_of(&self, instance: u32) -> Option<usize> {
        self.instances.iter().find(|i| i.id == instance).map(|i| i.class)
    }

    /// Relation predicate between two instances; the lowest index wins
    /// when several are listed.
    pub fn relation(&self, subject: u32, object: u32) -> Option<usize> {
        self.relations
            .iter()
            .filter(|r| r.subject == subject && r.object == object)
            .map(|r| r.predicate)
            .min()
    }
}

/// Uniform hash grid over the ground-truth points.
#[derive(Debug)]
pub struct PointIndex {
    cell: f64,
    grid: HashMap<[i64; 3], Vec<(Vec3, u32, usize)>>,
}

impl PointIndex {
    pub fn new(gt: &GroundTruth, cell: f64) -> Self {
        let mut grid: HashMap<[i64; 3], Vec<(Vec3, u32, usize)>> = HashMap::new();
        for inst in &gt.instances {
            for (k, p) in inst.points.iter().enumerate() {
                grid.entry(Self::key(*p, cell)).or_default().push((*p, inst.id, k));
            }
        }
        Self { cell, grid }
    }

    fn key(p: Vec3, cell: f64) -> [i64; 3] {
        p.map(|v| (v / cell).floor() as i64)
    }

    /// Nearest ground-truth point within `radius` (at most one cell):
    /// `(instance id, point index)`; ties go to the first point listed.
    pub fn nearest(&self, p: Vec3, radius: f64) -> Option<(u32, usize)> {
        let c = Self::key(p, self.cell);
        let reach = (radius / self.cell).ceil() as i64;
        let mut best: Option<(f64, u32, usize)> = None;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let Some(bucket) = self.grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &(q, inst, k) in bucket {
                        let d2: f64 = (0..3).map(|i| (p[i] - q[i]).powi(2)).sum();
                        if d2 <= radius * radius {
                            let better = match best {
                                None => true,
                                Some((bd, bi, bk)) => d2 < bd || (d2 == bd && (inst, k) < (bi, bk)),
                            };
                            if better {
                                best = Some((d2, inst, k));
                            }
                        }
                    }
                }
            }
        }
        best.map(|(_, i, k)| (i, k))
    }
}

/// Instance of every point, `None` beyond the association radius.
pub fn associate(points: &[Point], index: &PointIndex) -> Vec<Option<(u32, usize)>> {
    points
        .iter()
        .map(|p| index.nearest(p.position, ASSOCIATION_RADIUS))
        .collect()
}

/// Outcome of matching one segment against the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMatch {
    pub instance: Option<u32>,
    /// Share of the segment's points on the best instance.
    pub intersection: f64,
    /// Share of each other touched instance's points covered.
    pub other_coverage: BTreeMap<u32, f64>,
}

/// Applies the intersection and coverage rules to one segment's
/// associated points.
pub fn match_segment(assoc: &[Option<(u32, usize)>], gt: &GroundTruth) -> SegmentMatch {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    let mut covered: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for (inst, k) in assoc.iter().flatten() {
        *counts.entry(*inst).or_default() += 1;
        covered.entry(*inst).or_default().insert(*k);
    }
    let best = counts.iter().fold(None, |b: Option<(u32, usize)>, (&i, &c)| match b {
        Some((_, bc)) if bc >= c => b,
        _ => Some((i, c)),
    });
    let Some((best, hits)) = best else {
        return SegmentMatch {
            instance: None,
            intersection: 0.0,
            other_coverage: BTreeMap::new(),
        };
    };
    let intersection = hits as f64 / assoc.len().max(1) as f64;
    let sizes: BTreeMap<u32, usize> = gt.instances.iter().map(|i| (i.id, i.points.len())).collect();
    let other_coverage: BTreeMap<u32, f64> = covered
        .iter()
        .filter(|(&i, _)| i != best)
        .map(|(&i, s)| (i, s.len() as f64 / sizes.get(&i).copied().unwrap_or(1).max(1) as f64))
        .collect();
    let accepted = intersection >= MIN_INTERSECTION && other_coverage.values().all(|&c| c <= MAX_OTHER_COVERAGE);
    SegmentMatch {
        instance: accepted.then_some(best),
        intersection,
        other_coverage,
    }
}

/// Node and edge labels of a segmented scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneLabels {
    pub instance: BTreeMap<SegmentId, Option<u32>>,
    pub class: BTreeMap<SegmentId, Option<usize>>,
    /// Predicate per directed edge of the topology.
    pub predicate: BTreeMap<EdgeKey, usize>,
}

/// Matches every segment to an instance and derives the predicate of every
/// directed edge: `same part` within an instance, the inherited instance
/// relation across instances, `none` otherwise.
pub fn generate_labels(
    segments: &BTreeMap<SegmentId, Vec<Point>>,
    topology: &Topology,
    gt: &GroundTruth,
) -> SceneLabels {
    let index = PointIndex::new(gt, ASSOCIATION_RADIUS);
    let mut labels = SceneLabels::default();
    for (&id, pts) in segments {
        let m = match_segment(&associate(pts, &index), gt);
        labels.instance.insert(id, m.instance);
        labels.class.insert(id, m.instance.and_then(|i| gt.class_of(i)));
    }
    for (a, b) in topology.directed_edges() {
        let ia = labels.instance.get(&a).copied().flatten();
        let ib = labels.instance.get(&b).copied().flatten();
        let p = match (ia, ib) {
            (Some(x), Some(y)) if x == y => SAME_PART,
            (Some(x), Some(y)) => gt.relation(x, y).unwrap_or(NONE),
            _ => NONE,
        };
        labels.predicate.insert((a, b), p);
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: u32, class: usize, y: f64, n: usize) -> GtInstance {
        GtInstance {
            id,
            class,
            points: (0..n).map(|i| [i as f64 * 0.1, y, 0.0]).collect(),
        }
    }

    fn gt() -> GroundTruth {
        GroundTruth {
            instances: vec![line(1, 2, 0.0, 100), line(2, 3, 5.0, 100)],
            relations: vec![GtRelation {
                subject: 1,
                object: 2,
                predicate: 2,
            }],
            ..Default::default()
        }
    }

    fn segment(on_a: usize, on_b: usize, stray: usize) -> Vec<Point> {
        let mut pts: Vec<Point> = (0..on_a)
            .map(|i| Point::at([i as f64 * 0.1 + 0.005, 0.0, 0.0]))
            .collect();
        pts.extend((0..on_b).map(|i| Point::at([i as f64 * 0.1, 5.0, 0.01])));
        pts.extend((0..stray).map(|i| Point::at([i as f64, -9.0, 0.0])));
        pts
    }

    fn matched(pts: &[Point]) -> SegmentMatch {
        let g = gt();
        match_segment(&associate(pts, &PointIndex::new(&g, ASSOCIATION_RADIUS)), &g)
    }

    #[test]
    fn majority_with_small_spill_is_matched() {
        let m = matched(&segment(60, 8, 32));
        assert_eq!(m.instance, Some(1));
        assert!((m.intersection - 0.6).abs() < 1e-12);
        assert!((m.other_coverage[&2] - 0.08).abs() < 1e-12);
    }

    #[test]
    fn covering_another_instance_rejects() {
        let m = matched(&segment(60, 15, 25));
        assert_eq!(m.instance, None);
        assert!((m.other_coverage[&2] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn small_intersection_rejects() {
        assert_eq!(matched(&segment(40, 0, 60)).instance, None);
        assert_eq!(matched(&segment(0, 0, 10)).instance, None);
    }

    #[test]
    fn co_instance_segments_get_same_part_both_ways() {
        let g = gt();
        let s = |i| SegmentId(i);
        let segs = BTreeMap::from([
            (s(1), segment(30, 0, 0)),
            (s(2), (30..60).map(|i| Point::at([i as f64 * 0.1, 0.0, 0.0])).collect()),
            (s(3), segment(0, 50, 0)),
            (s(4), segment(0, 0, 20)),
        ]);
        let topo = Topology::from_edges(segs.keys().copied(), [(s(1), s(2)), (s(2), s(3)), (s(3), s(4))]);
        let l = generate_labels(&segs, &topo, &g);
        assert_eq!(l.predicate[&(s(1), s(2))], SAME_PART);
        assert_eq!(l.predicate[&(s(2), s(1))], SAME_PART);
        assert_eq!(l.predicate[&(s(2), s(3))], 2);
        assert_eq!(l.predicate[&(s(3), s(2))], NONE);
        assert_eq!(l.predicate[&(s(3), s(4))], NONE);
        assert_eq!(l.class[&s(3)], Some(3));
        assert_eq!(l.class[&s(4)], None);
    }

    #[test]
    fn labels_ignore_segment_order_and_repeat() {
        let g = gt();
        let s = |i| SegmentId(i);
        let segs = BTreeMap::from([(s(7), segment(60, 8, 32)), (s(3), segment(0, 50, 0))]);
        let topo = Topology::from_edges(segs.keys().copied(), [(s(3), s(7))]);
        let a = generate_labels(&segs, &topo, &g);
        let b = generate_labels(&segs, &topo, &g);
        assert_eq!(a, b);
        let mut rev = segs[&s(7)].clone();
        rev.reverse();
        let segs2 = BTreeMap::from([(s(7), rev), (s(3), segs[&s(3)].clone())]);
        assert_eq!(generate_labels(&segs2, &topo, &g), a);
    }
}
