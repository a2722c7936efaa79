//! Segment map: growing point sets with incrementally maintained shape
//! properties.
//!
//! Every live segment keeps a running count, mean and sum of squared
//! deviations per axis plus its bounding-box corners, so additions and merges
//! update centroid, spread and box in O(1) per point (or per merge). The
//! batch path [`recompute_properties`] recomputes everything from the point
//! set and is what the incremental path is checked against.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];

/// Stable identifier of a segment across frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub u32);

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

const NORMAL_TOLERANCE: f64 = 1e-3;

/// A reconstructed surface point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub position: Vec3,
    /// Unit normal, or all zeros when the source did not provide one.
    pub normal: Vec3,
    pub color: Vec3,
}

impl Point {
    pub fn at(position: Vec3) -> Self {
        Self {
            position,
            normal: [0.0; 3],
            color: [0.0; 3],
        }
    }

    pub fn from_array(v: [f64; 9]) -> Self {
        Self {
            position: [v[0], v[1], v[2]],
            normal: [v[3], v[4], v[5]],
            color: [v[6], v[7], v[8]],
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        let (p, n, c) = (self.position, self.normal, self.color);
        [p[0], p[1], p[2], n[0], n[1], n[2], c[0], c[1], c[2]]
    }

    pub fn validate(&self) -> Result<(), MapError> {
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(MapError::InvalidPoint("non-finite component".into()));
        }
        let norm = self.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm != 0.0 && (norm - 1.0).abs() > NORMAL_TOLERANCE {
            return Err(MapError::InvalidPoint(format!("normal has length {norm}")));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(MapError::InvalidPoint("color outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("unknown segment {0} referenced by {1}")]
    UnknownSegment(SegmentId, &'static str),
    #[error("segment {0} is merged more than once in one frame")]
    DuplicateMergeSource(SegmentId),
    #[error("segment {0} cannot be merged into itself")]
    SelfMerge(SegmentId),
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("segment has no points")]
    EmptySegment,
}

/// Shape descriptors of a segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentProperties {
    pub centroid: Vec3,
    /// Per-axis population standard deviation.
    pub std: Vec3,
    /// Axis-aligned bounding-box extents.
    pub bbox: Vec3,
    /// Largest bbox extent.
    pub length: f64,
    /// Product of the bbox extents.
    pub volume: f64,
}

impl SegmentProperties {
    fn from_moments(mean: Vec3, m2: Vec3, count: usize, min: Vec3, max: Vec3) -> Self {
        let n = count as f64;
        let std = [0, 1, 2].map(|k| (m2[k] / n).max(0.0).sqrt());
        let bbox = [0, 1, 2].map(|k| (max[k] - min[k]).max(0.0));
        Self {
            centroid: mean,
            std,
            bbox,
            length: bbox_length(bbox),
            volume: bbox_volume(bbox),
        }
    }
}

pub fn bbox_length(b: Vec3) -> f64 {
    b[0].max(b[1]).max(b[2])
}

pub fn bbox_volume(b: Vec3) -> f64 {
    b[0] * b[1] * b[2]
}

/// Running first and second moments plus bounds of a point set.
///
/// Moments combine with the pairwise update of Chan et al. so that merging
/// two segments is exact up to rounding and constant coordinates keep a zero
/// spread.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Moments {
    count: usize,
    mean: Vec3,
    m2: Vec3,
    min: Vec3,
    max: Vec3,
}

impl Moments {
    fn empty() -> Self {
        Self {
            count: 0,
            mean: [0.0; 3],
            m2: [0.0; 3],
            min: [f64::INFINITY; 3],
            max: [f64::NEG_INFINITY; 3],
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn push(&mut self, p: Vec3) {
        self.count += 1;
        let n = self.count as f64;
        for k in 0..3 {
            let delta = p[k] - self.mean[k];
            self.mean[k] += delta / n;
            self.m2[k] += delta * (p[k] - self.mean[k]);
            self.min[k] = self.min[k].min(p[k]);
            self.max[k] = self.max[k].max(p[k]);
        }
    }

    fn absorb(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for k in 0..3 {
            let delta = other.mean[k] - self.mean[k];
            self.mean[k] += delta * nb / n;
            self.m2[k] += other.m2[k] + delta * delta * na * nb / n;
            self.min[k] = self.min[k].min(other.min[k]);
            self.max[k] = self.max[k].max(other.max[k]);
        }
        self.count += other.count;
    }
}

/// A segment of the map. Prediction bookkeeping lives in the neighbor graph.
#[derive(Clone, Debug)]
pub struct Segment {
    pub id: SegmentId,
    points: Vec<Point>,
    moments: Moments,
    /// Frame of the last geometric change.
    pub last_updated_frame: u64,
}

impl Segment {
    pub fn new(id: SegmentId) -> Self {
        Self {
            id,
            points: Vec::new(),
            moments: Moments::empty(),
            last_updated_frame: 0,
        }
    }

    pub fn from_points(id: SegmentId, points: impl IntoIterator<Item = Point>) -> Self {
        let mut seg = Self::new(id);
        seg.extend(points);
        seg
    }

    pub fn extend(&mut self, points: impl IntoIterator<Item = Point>) {
        for p in points {
            self.moments.push(p.position);
            self.points.push(p);
        }
    }

    fn absorb(&mut self, other: Segment) {
        self.moments.absorb(&other.moments);
        self.points.extend(other.points);
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.moments.count
    }

    pub fn is_empty(&self) -> bool {
        self.moments.count == 0
    }

    /// Incrementally maintained properties. `None` for an empty segment.
    pub fn properties(&self) -> Option<SegmentProperties> {
        let m = &self.moments;
        (m.count > 0).then(|| SegmentProperties::from_moments(m.mean, m.m2, m.count, m.min, m.max))
    }

    pub fn bbox_bounds(&self) -> Option<(Vec3, Vec3)> {
        (self.moments.count > 0).then_some((self.moments.min, self.moments.max))
    }
}

/// Batch computation of segment properties from the full point set.
pub fn recompute_properties(points: &[Point]) -> Result<SegmentProperties, MapError> {
    if points.is_empty() {
        return Err(MapError::EmptySegment);
    }
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            mean[k] += p.position[k];
            min[k] = min[k].min(p.position[k]);
            max[k] = max[k].max(p.position[k]);
        }
    }
    mean = mean.map(|s| s / n);
    let mut m2 = [0.0; 3];
    for p in points {
        for k in 0..3 {
            let d = p.position[k] - mean[k];
            m2[k] += d * d;
        }
    }
    Ok(SegmentProperties::from_moments(mean, m2, points.len(), min, max))
}

/// One frame of map changes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameUpdate {
    pub frame: u64,
    pub additions: BTreeMap<SegmentId, Vec<Point>>,
    /// `(source, destination)` pairs, applied in order after the additions.
    pub merges: Vec<(SegmentId, SegmentId)>,
    pub removals: Vec<SegmentId>,
}

/// What a frame did to the map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameOutcome {
    /// Live segments whose geometry changed, ascending.
    pub touched: Vec<SegmentId>,
    /// Segments that no longer exist: explicit removals and merge sources.
    pub removed: Vec<SegmentId>,
    pub merges: Vec<(SegmentId, SegmentId)>,
}

#[derive(Clone, Debug, Default)]
pub struct SceneMap {
    segments: BTreeMap<SegmentId, Segment>,
    frame: u64,
}

impl SceneMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn get(&self, id: SegmentId) -> Option<&Segment> {
        self.segments.get(&id)
    }

    pub fn get_mut(&mut self, id: SegmentId) -> Option<&mut Segment> {
        self.segments.get_mut(&id)
    }

    pub fn contains(&self, id: SegmentId) -> bool {
        self.segments.contains_key(&id)
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.values()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    fn validate(&self, update: &FrameUpdate) -> Result<(), MapError> {
        for points in update.additions.values() {
            for p in points {
                p.validate()?;
            }
        }
        let mut live: BTreeSet<SegmentId> = self.segments.keys().copied().collect();
        live.extend(update.additions.keys().copied());
        let mut sources = BTreeSet::new();
        for &(src, dst) in &update.merges {
            if src == dst {
                return Err(MapError::SelfMerge(src));
            }
            if !sources.insert(src) {
                return Err(MapError::DuplicateMergeSource(src));
            }
            if !live.contains(&src) {
                return Err(MapError::UnknownSegment(src, "merge source"));
            }
            if !live.contains(&dst) {
                return Err(MapError::UnknownSegment(dst, "merge destination"));
            }
            live.remove(&src);
        }
        for &id in &update.removals {
            if !live.remove(&id) {
                return Err(MapError::UnknownSegment(id, "removal"));
            }
        }
        Ok(())
    }

    /// Applies additions, then merges, then removals. A rejected update
    /// leaves the map untouched.
    pub fn apply_frame(&mut self, update: &FrameUpdate) -> Result<FrameOutcome, MapError> {
        self.validate(update)?;
        self.frame = update.frame;
        let mut touched = BTreeSet::new();
        let mut removed = Vec::new();

        for (&id, points) in &update.additions {
            if points.is_empty() && self.segments.contains_key(&id) {
                continue;
            }
            let seg = self.segments.entry(id).or_insert_with(|| Segment::new(id));
            seg.extend(points.iter().copied());
            seg.last_updated_frame = update.frame;
            touched.insert(id);
        }
        for &(src, dst) in &update.merges {
            let source = self.segments.remove(&src).expect("validated merge source");
            let dest = self.segments.get_mut(&dst).expect("validated merge destination");
            dest.absorb(source);
            dest.last_updated_frame = update.frame;
            touched.remove(&src);
            touched.insert(dst);
            removed.push(src);
        }
        for &id in &update.removals {
            self.segments.remove(&id);
            touched.remove(&id);
            removed.push(id);
        }
        // An addition of zero points to a fresh id leaves an empty segment.
        let empties: Vec<SegmentId> = touched
            .iter()
            .copied()
            .filter(|id| self.segments[id].is_empty())
            .collect();
        for id in empties {
            self.segments.remove(&id);
            touched.remove(&id);
        }

        Ok(FrameOutcome {
            touched: touched.into_iter().collect(),
            removed,
            merges: update.merges.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(coords: &[Vec3]) -> Vec<Point> {
        coords.iter().map(|&p| Point::at(p)).collect()
    }

    fn add(frame: u64, id: u32, coords: &[Vec3]) -> FrameUpdate {
        FrameUpdate {
            frame,
            additions: [(SegmentId(id), pts(coords))].into_iter().collect(),
            ..Default::default()
        }
    }

    fn assert_close(a: Vec3, b: Vec3, tol: f64) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn two_points_then_third_then_merge() {
        let mut map = SceneMap::new();
        let out = map
            .apply_frame(&add(0, 1, &[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))
            .unwrap();
        assert_eq!(out.touched, vec![SegmentId(1)]);
        let p = map.get(SegmentId(1)).unwrap().properties().unwrap();
        assert_close(p.centroid, [1.0, 0.0, 0.0], 1e-12);
        assert_close(p.bbox, [2.0, 0.0, 0.0], 1e-12);
        assert_eq!(p.length, 2.0);

        map.apply_frame(&add(1, 1, &[[4.0, 6.0, 0.0]])).unwrap();
        let seg = map.get(SegmentId(1)).unwrap();
        let p = seg.properties().unwrap();
        let batch = recompute_properties(seg.points()).unwrap();
        assert_close(p.centroid, [2.0, 2.0, 0.0], 1e-12);
        // batch oracle: var_x = (4+0+4)/3, var_y = (4+4+16)/3
        assert_close(p.std, [(8.0f64 / 3.0).sqrt(), 8.0f64.sqrt(), 0.0], 1e-12);
        assert!((p.std[0] - 1.633).abs() < 1e-3 && (p.std[1] - 2.828).abs() < 1e-3);
        assert_eq!(p.length, 6.0);
        assert_close(p.std, batch.std, 1e-9);

        let mut update = add(2, 2, &[[10.0, 0.0, 0.0]]);
        update.merges.push((SegmentId(2), SegmentId(1)));
        let out = map.apply_frame(&update).unwrap();
        assert_eq!(out.touched, vec![SegmentId(1)]);
        assert_eq!(out.removed, vec![SegmentId(2)]);
        let seg = map.get(SegmentId(1)).unwrap();
        assert_eq!(seg.len(), 4);
        assert_close(seg.properties().unwrap().centroid, [4.0, 1.5, 0.0], 1e-12);
        assert!(!map.contains(SegmentId(2)));
    }

    #[test]
    fn singleton_properties() {
        let p = recompute_properties(&pts(&[[1.0, 2.0, 3.0]])).unwrap();
        assert_eq!(p.centroid, [1.0, 2.0, 3.0]);
        assert_eq!(p.std, [0.0; 3]);
        assert_eq!(p.bbox, [0.0; 3]);
        assert_eq!(p.volume, 0.0);
    }

    #[test]
    fn empty_segment_is_an_error() {
        assert_eq!(recompute_properties(&[]), Err(MapError::EmptySegment));
    }

    #[test]
    fn unit_cube_spread_below_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let points: Vec<Point> = (0..1000)
            .map(|_| Point::at([rng.gen(), rng.gen(), rng.gen()]))
            .collect();
        let p = recompute_properties(&points).unwrap();
        assert!(p.std.iter().all(|&s| s < 0.5));
    }

    #[test]
    fn rejected_update_leaves_map_unchanged() {
        let mut map = SceneMap::new();
        map.apply_frame(&add(0, 1, &[[0.0, 0.0, 0.0]])).unwrap();
        let mut bad = add(1, 1, &[[5.0, 5.0, 5.0]]);
        bad.merges.push((SegmentId(9), SegmentId(1)));
        assert_eq!(
            map.apply_frame(&bad),
            Err(MapError::UnknownSegment(SegmentId(9), "merge source"))
        );
        assert_eq!(map.get(SegmentId(1)).unwrap().len(), 1);
        assert_eq!(map.frame(), 0);

        let bad = FrameUpdate {
            frame: 1,
            removals: vec![SegmentId(4)],
            ..Default::default()
        };
        assert!(map.apply_frame(&bad).is_err());

        let bad = FrameUpdate {
            frame: 1,
            merges: vec![(SegmentId(1), SegmentId(1))],
            ..Default::default()
        };
        assert_eq!(map.apply_frame(&bad), Err(MapError::SelfMerge(SegmentId(1))));
    }

    #[test]
    fn merge_source_twice_is_rejected() {
        let mut map = SceneMap::new();
        let mut up = add(0, 1, &[[0.0; 3]]);
        up.additions.insert(SegmentId(2), pts(&[[1.0; 3]]));
        up.additions.insert(SegmentId(3), pts(&[[2.0; 3]]));
        map.apply_frame(&up).unwrap();
        let bad = FrameUpdate {
            frame: 1,
            merges: vec![(SegmentId(1), SegmentId(2)), (SegmentId(1), SegmentId(3))],
            ..Default::default()
        };
        assert_eq!(map.apply_frame(&bad), Err(MapError::DuplicateMergeSource(SegmentId(1))));
    }

    #[test]
    fn destination_created_in_same_frame() {
        let mut map = SceneMap::new();
        map.apply_frame(&add(0, 1, &[[0.0; 3]])).unwrap();
        let mut up = add(1, 7, &[[2.0, 0.0, 0.0]]);
        up.merges.push((SegmentId(1), SegmentId(7)));
        up.removals.push(SegmentId(7));
        let out = map.apply_frame(&up).unwrap();
        assert!(out.touched.is_empty());
        assert!(map.is_empty());
    }

    #[test]
    fn invalid_points_are_rejected() {
        let mut p = Point::at([0.0; 3]);
        p.normal = [0.0, 0.0, 0.5];
        assert!(p.validate().is_err());
        p.normal = [0.0, 0.0, 1.0005];
        assert!(p.validate().is_ok());
        p.color = [1.2, 0.0, 0.0];
        assert!(p.validate().is_err());
    }
}
