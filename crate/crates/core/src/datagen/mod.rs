//! Synthetic scenes, ground-truth labels and dataset assembly.

pub mod labels;
pub mod scene;
pub mod stream;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use labels::{generate_labels, GroundTruth, SceneLabels};
pub use scene::{generate_scene, random_room, GeneratedScene, ObjectSpec, RoomConfig, SceneSpec, Shape, StreamConfig};

use crate::neighbor_graph::{bbox_distance, Topology};
use crate::scene_map::{FrameUpdate, MapError, SceneMap, SegmentId};
use crate::train::{LabeledGraph, LabeledSegment};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("stream line {line}: {message}")]
    Stream { line: usize, message: String },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Indices of the desk-scale vocabulary.
pub mod desk {
    pub const FLOOR: usize = 0;
    pub const WALL: usize = 1;
    pub const TABLE: usize = 2;
    pub const CHAIR: usize = 3;
    pub const SHELF: usize = 4;

    pub const NONE: usize = 0;
    pub const SAME_PART: usize = 1;
    pub const STANDING_ON: usize = 2;
    pub const ATTACHED_TO: usize = 3;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub classes: Vec<String>,
    /// Index 0 is `none`, index 1 is `same part`.
    pub predicates: Vec<String>,
    pub stuff: Vec<usize>,
}

impl Vocabulary {
    pub fn desk() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            classes: s(&["floor", "wall", "table", "chair", "shelf"]),
            predicates: s(&["none", "same part", "standing on", "attached to"]),
            stuff: vec![desk::FLOOR, desk::WALL],
        }
    }

    pub fn color(&self, class: usize) -> [f64; 3] {
        const PALETTE: [[f64; 3]; 5] = [
            [0.55, 0.45, 0.35],
            [0.85, 0.85, 0.8],
            [0.6, 0.3, 0.1],
            [0.2, 0.4, 0.7],
            [0.4, 0.6, 0.3],
        ];
        PALETTE[class % PALETTE.len()]
    }
}

/// Replays a stream into a fresh map.
pub fn replay(frames: &[FrameUpdate]) -> Result<SceneMap, DataError> {
    let mut map = SceneMap::new();
    for f in frames {
        map.apply_frame(f)?;
    }
    Ok(map)
}

/// Proximity graph over the segments of `map` with at least `min_points`
/// points.
pub fn proximity_topology(map: &SceneMap, min_points: usize, threshold: f64) -> Topology {
    let segs: Vec<_> = map
        .segments()
        .filter(|s| s.len() >= min_points)
        .map(|s| (s.id, s.bbox_bounds().expect("non-empty segment")))
        .collect();
    let mut t = Topology::new();
    for (id, _) in &segs {
        t.add_node(*id);
    }
    for (i, (a, ba)) in segs.iter().enumerate() {
        for (b, bb) in &segs[i + 1..] {
            if bbox_distance(*ba, *bb) <= threshold {
                t.add_edge(*a, *b);
            }
        }
    }
    t
}

/// Labelled training graph of the final state of a stream.
pub fn labeled_graph(map: &SceneMap, gt: &GroundTruth, min_points: usize, threshold: f64) -> LabeledGraph {
    let topology = proximity_topology(map, min_points, threshold);
    let segments: BTreeMap<SegmentId, Vec<_>> = topology
        .nodes()
        .map(|id| (id, map.get(id).expect("live segment").points().to_vec()))
        .collect();
    let labels = generate_labels(&segments, &topology, gt);
    let segments = segments
        .into_iter()
        .map(|(id, points)| {
            let properties = map.get(id).and_then(|s| s.properties()).expect("non-empty segment");
            let label = labels.class[&id];
            (
                id,
                LabeledSegment {
                    points,
                    properties,
                    label,
                },
            )
        })
        .collect();
    LabeledGraph {
        segments,
        topology,
        edge_labels: labels.predicate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_on_floor_labels() {
        let spec = SceneSpec {
            objects: vec![
                ObjectSpec {
                    class: desk::FLOOR,
                    shape: Shape::Plane {
                        min: [0.0; 3],
                        max: [3.0, 3.0, 0.0],
                    },
                    segments: 1,
                    relations: vec![],
                },
                ObjectSpec {
                    class: desk::TABLE,
                    shape: Shape::Box {
                        min: [1.0, 1.0, 0.0],
                        max: [2.2, 1.8, 0.75],
                        open_bottom: true,
                    },
                    segments: 3,
                    relations: vec![(0, desk::STANDING_ON)],
                },
            ],
            stream: StreamConfig {
                frames: 1,
                reveal_frames: 1,
                merges: 0,
                noise_segments: 0,
                ..Default::default()
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = generate_scene(&spec, &Vocabulary::desk(), &mut rng).unwrap();
        let map = replay(&scene.frames).unwrap();
        let g = labeled_graph(&map, &scene.gt, 1, 0.5);
        let tables: Vec<SegmentId> = g
            .segments
            .iter()
            .filter(|(_, s)| s.label == Some(desk::TABLE))
            .map(|(id, _)| *id)
            .collect();
        assert_eq!(tables.len(), 3);
        let floor = SegmentId(1);
        assert_eq!(g.segments[&floor].label, Some(desk::FLOOR));
        for &t in &tables {
            assert_eq!(g.edge_labels[&(t, floor)], desk::STANDING_ON);
            assert_eq!(g.edge_labels[&(floor, t)], desk::NONE);
            for &u in &tables {
                if let Some(&p) = g.edge_labels.get(&(t, u)) {
                    assert_eq!(p, desk::SAME_PART);
                }
            }
        }
        assert!(g.edge_labels.iter().filter(|(_, &p)| p == desk::SAME_PART).count() >= 4);
    }
}
