//! Hand-crafted inputs of the network: normalized point sets, per-segment
//! descriptors and pairwise relation vectors.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::SpnError;
use crate::neighbor_graph::FrozenSegment;
use crate::scene_map::{Point, SegmentId, SegmentProperties};

/// Extents below this are clamped before taking logarithms.
pub const LOG_EPS: f64 = 1e-6;

/// Width of the per-segment descriptor: std (3), ln bbox (3), ln volume, ln length.
pub const DESCRIPTOR_DIM: usize = 8;
/// Width of the pairwise relation vector.
pub const RELATION_DIM: usize = 11;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointChannels {
    #[default]
    Xyz,
    XyzNormal,
    XyzNormalRgb,
}

impl PointChannels {
    pub fn width(self) -> usize {
        match self {
            Self::Xyz => 3,
            Self::XyzNormal => 6,
            Self::XyzNormalRgb => 9,
        }
    }
}

fn clamped(props: &SegmentProperties) -> ([f64; 3], f64, f64) {
    let b = props.bbox.map(|v| v.max(LOG_EPS));
    let volume = b[0] * b[1] * b[2];
    let length = b[0].max(b[1]).max(b[2]);
    (b, volume, length)
}

/// `[σ, ln b, ln ν, ln l]` with extents clamped to [`LOG_EPS`].
pub fn node_descriptor(props: &SegmentProperties) -> Result<[f64; DESCRIPTOR_DIM], SpnError> {
    let (b, volume, length) = clamped(props);
    let s = props.std;
    let out = [
        s[0],
        s[1],
        s[2],
        b[0].ln(),
        b[1].ln(),
        b[2].ln(),
        volume.ln(),
        length.ln(),
    ];
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(SpnError::NonFinite("node descriptor".into()))
    }
}

/// `[p̄ᵢ−p̄ⱼ, σᵢ−σⱼ, bᵢ−bⱼ, ln(lᵢ/lⱼ), ln(νᵢ/νⱼ)]`.
pub fn relation_vector(i: &SegmentProperties, j: &SegmentProperties) -> [f64; RELATION_DIM] {
    let (_, vi, li) = clamped(i);
    let (_, vj, lj) = clamped(j);
    let mut r = [0.0; RELATION_DIM];
    for k in 0..3 {
        r[k] = i.centroid[k] - j.centroid[k];
        r[3 + k] = i.std[k] - j.std[k];
        r[6 + k] = i.bbox[k] - j.bbox[k];
    }
    r[9] = (li / lj).ln();
    r[10] = (vi / vj).ln();
    r
}

/// Centers the points on `centroid`, scales them into the unit sphere and
/// lays out the requested channels row by row.
pub fn normalize_points(points: &[Point], centroid: [f64; 3], channels: PointChannels) -> Array2<f64> {
    let mut radius: f64 = 0.0;
    for p in points {
        let d: f64 = (0..3).map(|k| (p.position[k] - centroid[k]).powi(2)).sum();
        radius = radius.max(d.sqrt());
    }
    let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
    let width = channels.width();
    let mut out = Array2::zeros((points.len(), width));
    for (r, p) in points.iter().enumerate() {
        for k in 0..3 {
            out[[r, k]] = (p.position[k] - centroid[k]) * scale;
        }
        if width >= 6 {
            for k in 0..3 {
                out[[r, 3 + k]] = p.normal[k];
            }
        }
        if width == 9 {
            for k in 0..3 {
                out[[r, 6 + k]] = p.color[k];
            }
        }
    }
    out
}

/// Everything the network needs to know about one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInput {
    pub id: SegmentId,
    pub points: Array2<f64>,
    pub descriptor: [f64; DESCRIPTOR_DIM],
    pub properties: SegmentProperties,
}

impl NodeInput {
    pub fn new(
        id: SegmentId,
        points: &[Point],
        properties: SegmentProperties,
        channels: PointChannels,
    ) -> Result<Self, SpnError> {
        if points.is_empty() {
            return Err(SpnError::EmptyInput(format!("segment {id} has no points")));
        }
        Ok(Self {
            id,
            points: normalize_points(points, properties.centroid, channels),
            descriptor: node_descriptor(&properties)?,
            properties,
        })
    }

    pub fn from_frozen(seg: &FrozenSegment, channels: PointChannels) -> Result<Self, SpnError> {
        Self::new(seg.id, &seg.points, seg.properties, channels)
    }
}
