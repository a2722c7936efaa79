//! Synthetic rooms built from boxes, cylinders and planes, revealed
//! progressively as a frame stream.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::labels::{GroundTruth, GtInstance, GtRelation};
use super::{DataError, Vocabulary};
use crate::scene_map::{FrameUpdate, Point, SegmentId, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Surface of an axis-aligned box; the bottom face is left out when
    /// `open_bottom` is set.
    Box { min: Vec3, max: Vec3, open_bottom: bool },
    /// Side and top of an upright cylinder standing on `base`.
    Cylinder { base: Vec3, radius: f64, height: f64 },
    /// Axis-aligned rectangle; exactly one extent of `max - min` is zero.
    Plane { min: Vec3, max: Vec3 },
}

impl Shape {
    fn validate(&self) -> Result<(), DataError> {
        let ok = match *self {
            Shape::Box { min, max, .. } => (0..3).all(|k| max[k] > min[k]),
            Shape::Cylinder { radius, height, .. } => radius > 0.0 && height > 0.0,
            Shape::Plane { min, max } => {
                let zero = (0..3).filter(|&k| max[k] == min[k]).count();
                zero == 1 && (0..3).all(|k| max[k] >= min[k])
            }
        };
        if ok && self.area() > 0.0 {
            Ok(())
        } else {
            Err(DataError::Spec(format!("degenerate shape {self:?}")))
        }
    }

    fn faces(&self) -> Vec<(Vec3, Vec3, Vec3)> {
        // (min corner, max corner, outward normal) per rectangular face
        match *self {
            Shape::Box { min, max, open_bottom } => {
                let mut f = Vec::new();
                for k in 0..3 {
                    for (side, n) in [(min[k], -1.0), (max[k], 1.0)] {
                        if k == 2 && n < 0.0 && open_bottom {
                            continue;
                        }
                        let (mut lo, mut hi) = (min, max);
                        lo[k] = side;
                        hi[k] = side;
                        let mut normal = [0.0; 3];
                        normal[k] = n;
                        f.push((lo, hi, normal));
                    }
                }
                f
            }
            Shape::Plane { min, max } => {
                let k = (0..3).find(|&k| max[k] == min[k]).expect("validated plane");
                let mut normal = [0.0; 3];
                normal[k] = 1.0;
                vec![(min, max, normal)]
            }
            Shape::Cylinder { .. } => Vec::new(),
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Cylinder { radius, height, .. } => {
                2.0 * std::f64::consts::PI * radius * height + std::f64::consts::PI * radius * radius
            }
            _ => self
                .faces()
                .iter()
                .map(|(lo, hi, _)| (0..3).map(|k| hi[k] - lo[k]).filter(|e| *e > 0.0).product::<f64>())
                .sum(),
        }
    }

    fn sample(&self, n: usize, color: Vec3, rng: &mut impl Rng) -> Vec<Point> {
        let mut jitter = |c: f64| (c + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
        let colors: Vec<Vec3> = (0..n).map(|_| color.map(&mut jitter)).collect();
        let mut out = Vec::with_capacity(n);
        match *self {
            Shape::Cylinder { base, radius, height } => {
                let side = 2.0 * radius * height;
                let top = radius * radius / 2.0;
                for c in colors {
                    let (position, normal) = if rng.gen_bool(side / (side + top)) {
                        let a = rng.gen_range(0.0..std::f64::consts::TAU);
                        let z = rng.gen_range(0.0..height);
                        let (s, co) = a.sin_cos();
                        ([base[0] + radius * co, base[1] + radius * s, base[2] + z], [co, s, 0.0])
                    } else {
                        let r = radius * rng.gen::<f64>().sqrt();
                        let a = rng.gen_range(0.0..std::f64::consts::TAU);
                        (
                            [base[0] + r * a.cos(), base[1] + r * a.sin(), base[2] + height],
                            [0.0, 0.0, 1.0],
                        )
                    };
                    out.push(Point {
                        position,
                        normal,
                        color: c,
                    });
                }
            }
            _ => {
                let faces = self.faces();
                let areas: Vec<f64> = faces
                    .iter()
                    .map(|(lo, hi, _)| (0..3).map(|k| hi[k] - lo[k]).filter(|e| *e > 0.0).product())
                    .collect();
                let total: f64 = areas.iter().sum();
                for c in colors {
                    let mut u = rng.gen_range(0.0..total);
                    let mut f = 0;
                    while f + 1 < faces.len() && u >= areas[f] {
                        u -= areas[f];
                        f += 1;
                    }
                    let (lo, hi, normal) = faces[f];
                    let position = [0, 1, 2].map(|k| {
                        if hi[k] > lo[k] {
                            rng.gen_range(lo[k]..hi[k])
                        } else {
                            lo[k]
                        }
                    });
                    out.push(Point {
                        position,
                        normal,
                        color: c,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: usize,
    pub shape: Shape,
    /// Number of segments the object is split into.
    pub segments: usize,
    /// `(object index, predicate)` relations with this object as subject.
    #[serde(default)]
    pub relations: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub frames: u64,
    /// Frames over which each segment's points arrive.
    pub reveal_frames: u64,
    /// Points per square meter of surface.
    pub density: f64,
    pub min_object_points: usize,
    /// Segment merges injected between segments of the same object.
    pub merges: usize,
    /// Spurious clusters that appear and are removed again.
    pub noise_segments: usize,
    /// Paint objects in their class color instead of a random one.
    pub class_colors: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            frames: 12,
            reveal_frames: 4,
            density: 100.0,
            min_object_points: 100,
            merges: 1,
            noise_segments: 1,
            class_colors: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub stream: StreamConfig,
}

impl SceneSpec {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), DataError> {
        if self.stream.frames == 0 || self.stream.reveal_frames == 0 {
            return Err(DataError::Spec("stream needs at least one frame".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            o.shape.validate()?;
            if o.class >= vocab.classes.len() {
                return Err(DataError::Spec(format!("object {i} has unknown class {}", o.class)));
            }
            if o.segments == 0 {
                return Err(DataError::Spec(format!("object {i} has no segments")));
            }
            for &(target, p) in &o.relations {
                if target >= self.objects.len() || target == i || p < 2 || p >= vocab.predicates.len() {
                    return Err(DataError::Spec(format!(
                        "object {i} has an invalid relation ({target}, {p})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A stream together with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub frames: Vec<FrameUpdate>,
    pub gt: GroundTruth,
}

impl GeneratedScene {
    /// Number of points each segment id has received after every frame.
    pub fn cumulative_counts(&self) -> Vec<BTreeMap<SegmentId, usize>> {
        let mut counts: BTreeMap<SegmentId, usize> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.frames.len());
        for f in &self.frames {
            for (id, pts) in &f.additions {
                *counts.entry(*id).or_default() += pts.len();
            }
            for &(src, dst) in &f.merges {
                let n = counts.remove(&src).unwrap_or(0);
                *counts.entry(dst).or_default() += n;
            }
            for id in &f.removals {
                counts.remove(id);
            }
            out.push(counts.clone());
        }
        out
    }
}

/// Splits points into `k` equal-count slabs along their longest extent.
fn split_points(mut points: Vec<Point>, k: usize) -> Vec<Vec<Point>> {
    let axis = (0..3)
        .max_by(|&a, &b| {
            let ext = |k: usize| {
                let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| {
                    (l.min(p.position[k]), h.max(p.position[k]))
                });
                hi - lo
            };
            ext(a).total_cmp(&ext(b)).then(b.cmp(&a))
        })
        .expect("three axes");
    points.sort_by(|a, b| a.position[axis].total_cmp(&b.position[axis]));
    let n = points.len();
    let mut out = Vec::with_capacity(k);
    let mut rest = points.into_iter();
    for i in 0..k {
        let take = (i + 1) * n / k - i * n / k;
        out.push(rest.by_ref().take(take).collect());
    }
    out
}

/// Samples every object, splits it into segments and reveals the segments
/// over the configured frames.
pub fn generate_scene(spec: &SceneSpec, vocab: &Vocabulary, rng: &mut impl Rng) -> Result<GeneratedScene, DataError> {
    spec.validate(vocab)?;
    let cfg = &spec.stream;
    let frames = cfg.frames;
    let reveal = cfg.reveal_frames.min(frames);

    let mut instances = Vec::new();
    let mut relations = Vec::new();
    // (segment id, object index, points)
    let mut segments: Vec<(SegmentId, usize, Vec<Point>)> = Vec::new();
    let mut next_id = 1u32;
    for (i, o) in spec.objects.iter().enumerate() {
        let n = ((o.shape.area() * cfg.density).round() as usize).max(cfg.min_object_points);
        let color = if cfg.class_colors {
            vocab.color(o.class)
        } else {
            [rng.gen(), rng.gen(), rng.gen()]
        };
        let pts = o.shape.sample(n, color, rng);
        instances.push(GtInstance {
            id: i as u32 + 1,
            class: o.class,
            points: pts.iter().map(|p| p.position).collect(),
        });
        for &(target, predicate) in &o.relations {
            relations.push(GtRelation {
                subject: i as u32 + 1,
                object: target as u32 + 1,
                predicate,
            });
        }
        for part in split_points(pts, o.segments.min(n)) {
            segments.push((SegmentId(next_id), i, part));
            next_id += 1;
        }
    }

    let mut updates: Vec<FrameUpdate> = (0..frames)
        .map(|f| FrameUpdate {
            frame: f,
            ..Default::default()
        })
        .collect();
    // id that receives a segment's points from a given frame on
    let mut start = BTreeMap::new();
    let mut schedule: Vec<(SegmentId, u64, Vec<Vec<Point>>)> = Vec::new();
    for (id, _, pts) in &segments {
        let mut pts = pts.clone();
        pts.shuffle(rng);
        let s = rng.gen_range(0..=frames - reveal);
        let chunks = reveal as usize;
        let n = pts.len();
        let parts = (0..chunks)
            .map(|c| pts[c * n / chunks..(c + 1) * n / chunks].to_vec())
            .collect();
        start.insert(*id, s);
        schedule.push((*id, s, parts));
    }

    // merges between segments of the same object once both exist
    let mut merged_into: BTreeMap<SegmentId, (u64, SegmentId)> = BTreeMap::new();
    let mut candidates: Vec<(SegmentId, SegmentId)> = Vec::new();
    for w in segments.windows(2) {
        if w[0].1 == w[1].1 {
            candidates.push((w[1].0, w[0].0));
        }
    }
    candidates.shuffle(rng);
    let mut used = std::collections::BTreeSet::new();
    for (src, dst) in candidates {
        if merged_into.len() >= cfg.merges {
            break;
        }
        if used.contains(&src) || used.contains(&dst) {
            continue;
        }
        let at = start[&src].max(start[&dst]) + 1;
        if at >= frames {
            continue;
        }
        used.insert(src);
        used.insert(dst);
        merged_into.insert(src, (at, dst));
        updates[at as usize].merges.push((src, dst));
    }

    for (id, s, parts) in schedule {
        for (c, part) in parts.into_iter().enumerate() {
            let f = s + c as u64;
            let target = match merged_into.get(&id) {
                Some(&(at, dst)) if f > at => dst,
                _ => id,
            };
            if !part.is_empty() {
                updates[f as usize].additions.entry(target).or_default().extend(part);
            }
        }
    }

    // spurious clusters that never belong to an object
    for _ in 0..cfg.noise_segments {
        if frames < 2 {
            break;
        }
        let id = SegmentId(next_id);
        next_id += 1;
        let center = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(3.0..4.0),
        ];
        let cluster = Shape::Box {
            min: center.map(|c| c - 0.1),
            max: center.map(|c| c + 0.1),
            open_bottom: false,
        };
        let pts = cluster.sample(cfg.min_object_points, [0.5; 3], rng);
        let f = rng.gen_range(0..frames - 1);
        updates[f as usize].additions.insert(id, pts);
        let gone = (f + 2).min(frames - 1);
        updates[gone as usize].removals.push(id);
    }

    Ok(GeneratedScene {
        frames: updates,
        gt: GroundTruth {
            classes: vocab.classes.clone(),
            predicates: vocab.predicates.clone(),
            stuff: vocab.stuff.clone(),
            instances,
            relations,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoomConfig {
    pub tables: (usize, usize),
    pub chairs: (usize, usize),
    pub shelves: (usize, usize),
    pub floor_segments: usize,
    pub wall_segments: usize,
    pub table_segments: usize,
    pub chair_segments: usize,
    pub shelf_segments: usize,
    pub stream: StreamConfig,
}

impl Default for RoomConfig {
    fn default() -> Self {
        Self {
            tables: (1, 2),
            chairs: (1, 3),
            shelves: (1, 2),
            floor_segments: 4,
            wall_segments: 2,
            table_segments: 3,
            chair_segments: 2,
            shelf_segments: 2,
            stream: StreamConfig::default(),
        }
    }
}

fn overlaps(a: [f64; 4], b: [f64; 4], gap: f64) -> bool {
    a[0] < b[2] + gap && b[0] < a[2] + gap && a[1] < b[3] + gap && b[1] < a[3] + gap
}

/// A furnished rectangular room in the desk vocabulary.
pub fn random_room(cfg: &RoomConfig, rng: &mut impl Rng) -> SceneSpec {
    use super::desk::*;
    let w = rng.gen_range(4.0..6.0);
    let d = rng.gen_range(3.5..5.0);
    let h = 2.5;
    let mut objects = vec![ObjectSpec {
        class: FLOOR,
        shape: Shape::Plane {
            min: [0.0, 0.0, 0.0],
            max: [w, d, 0.0],
        },
        segments: cfg.floor_segments,
        relations: vec![],
    }];
    let walls = [
        ([0.0, 0.0, 0.0], [w, 0.0, h]),
        ([0.0, d, 0.0], [w, d, h]),
        ([0.0, 0.0, 0.0], [0.0, d, h]),
        ([w, 0.0, 0.0], [w, d, h]),
    ];
    for (min, max) in walls {
        objects.push(ObjectSpec {
            class: WALL,
            shape: Shape::Plane { min, max },
            segments: cfg.wall_segments,
            relations: vec![],
        });
    }
    let mut footprints: Vec<[f64; 4]> = Vec::new();
    let mut place = |fx: f64, fy: f64, against_wall: bool, rng: &mut dyn rand::RngCore| -> Option<([f64; 4], usize)> {
        for _ in 0..100 {
            let (rect, wall) = if against_wall {
                let wall = rng.gen_range(0..2usize);
                let x = rng.gen_range(0.3..w - fx - 0.3);
                let y = if wall == 0 { 0.0 } else { d - fy };
                ([x, y, x + fx, y + fy], 1 + wall)
            } else {
                let x = rng.gen_range(0.6..w - fx - 0.6);
                let y = rng.gen_range(0.6..d - fy - 0.6);
                ([x, y, x + fx, y + fy], 0)
            };
            if footprints.iter().all(|f| !overlaps(*f, rect, 0.15)) {
                footprints.push(rect);
                return Some((rect, wall));
            }
        }
        None
    };
    let count = |r: (usize, usize), rng: &mut dyn rand::RngCore| rng.gen_range(r.0..=r.1.max(r.0));
    for _ in 0..count(cfg.shelves, rng) {
        let (fx, fy, fz) = (rng.gen_range(0.8..1.2), 0.3, rng.gen_range(1.6..2.0));
        if let Some((r, wall)) = place(fx, fy, true, rng) {
            objects.push(ObjectSpec {
                class: SHELF,
                shape: Shape::Box {
                    min: [r[0], r[1], 0.0],
                    max: [r[2], r[3], fz],
                    open_bottom: true,
                },
                segments: cfg.shelf_segments,
                relations: vec![(0, STANDING_ON), (wall, ATTACHED_TO)],
            });
        }
    }
    for _ in 0..count(cfg.tables, rng) {
        let (fx, fy, fz) = (rng.gen_range(1.2..1.6), rng.gen_range(0.7..0.9), 0.75);
        if let Some((r, _)) = place(fx, fy, false, rng) {
            objects.push(ObjectSpec {
                class: TABLE,
                shape: Shape::Box {
                    min: [r[0], r[1], 0.0],
                    max: [r[2], r[3], fz],
                    open_bottom: true,
                },
                segments: cfg.table_segments,
                relations: vec![(0, STANDING_ON)],
            });
        }
    }
    for _ in 0..count(cfg.chairs, rng) {
        let (fx, fz) = (0.45, rng.gen_range(0.85..0.95));
        if let Some((r, _)) = place(fx, fx, false, rng) {
            let shape = if rng.gen_bool(0.5) {
                Shape::Box {
                    min: [r[0], r[1], 0.0],
                    max: [r[2], r[3], fz],
                    open_bottom: true,
                }
            } else {
                Shape::Cylinder {
                    base: [(r[0] + r[2]) / 2.0, (r[1] + r[3]) / 2.0, 0.0],
                    radius: fx / 2.0,
                    height: fz,
                }
            };
            objects.push(ObjectSpec {
                class: CHAIR,
                shape,
                segments: cfg.chair_segments,
                relations: vec![(0, STANDING_ON)],
            });
        }
    }
    SceneSpec {
        objects,
        stream: cfg.stream.clone(),
    }
}
