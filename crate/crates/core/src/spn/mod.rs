//! Scene-graph prediction network: point encoder, node and edge features,
//! message passing with feature-wise attention, and the two classifiers.

pub mod attention;
pub mod features;
mod model;
pub mod params;
mod predictor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{NodeInput, PointChannels};
pub use model::{BatchOutput, GraphBatch, LayerParams, RecomputeStats, Spn, StageTimings};
pub use predictor::{IncrementalPredictor, Prediction};

use crate::tape::NonFinite;

#[derive(Debug, Error)]
pub enum SpnError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("self edge on segment {0}")]
    SelfEdge(crate::scene_map::SegmentId),
    #[error("feature cache has no entry for {0}")]
    CacheMiss(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<NonFinite> for SpnError {
    fn from(e: NonFinite) -> Self {
        SpnError::NonFinite(e.op.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpnConfig {
    pub channels: PointChannels,
    /// Output widths of the shared per-point layers; the last one is the
    /// width of the pooled shape feature.
    pub encoder_dims: Vec<usize>,
    pub node_dim: usize,
    pub edge_dim: usize,
    /// Hidden width of the relation-vector MLP.
    pub edge_hidden: usize,
    pub query_dim: usize,
    pub target_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub num_predicates: usize,
    pub init_seed: u64,
}

impl Default for SpnConfig {
    fn default() -> Self {
        Self::desk(5, 4)
    }
}

impl SpnConfig {
    /// Full-size widths.
    pub fn paper(num_classes: usize, num_predicates: usize) -> Self {
        Self {
            channels: PointChannels::Xyz,
            encoder_dims: vec![64, 128, 512],
            node_dim: 512,
            edge_dim: 256,
            edge_hidden: 256,
            query_dim: 512,
            target_dim: 256,
            heads: 8,
            layers: 2,
            num_classes,
            num_predicates,
            init_seed: 0,
        }
    }

    /// Reduced widths for desk-scale experiments.
    pub fn desk(num_classes: usize, num_predicates: usize) -> Self {
        Self {
            encoder_dims: vec![32, 64, 128],
            node_dim: 256,
            edge_dim: 128,
            edge_hidden: 128,
            query_dim: 256,
            target_dim: 128,
            ..Self::paper(num_classes, num_predicates)
        }
    }

    /// Tiny widths for exhaustive gradient checks.
    pub fn tiny(num_classes: usize, num_predicates: usize) -> Self {
        Self {
            encoder_dims: vec![4, 6],
            node_dim: 6,
            edge_dim: 4,
            edge_hidden: 5,
            query_dim: 8,
            target_dim: 4,
            heads: 2,
            ..Self::paper(num_classes, num_predicates)
        }
    }

    pub fn validate(&self) -> Result<(), SpnError> {
        let fail = |m: String| Err(SpnError::Config(m));
        if self.encoder_dims.is_empty() || self.encoder_dims.contains(&0) {
            return fail("encoder needs at least one non-empty layer".into());
        }
        if [self.node_dim, self.edge_dim, self.edge_hidden, self.target_dim].contains(&0) {
            return fail("feature widths must be positive".into());
        }
        if self.heads == 0 || self.layers == 0 {
            return fail("heads and layers must be positive".into());
        }
        if self.query_dim == 0 || !self.query_dim.is_multiple_of(2) {
            return fail(format!("query width {} must be even", self.query_dim));
        }
        if !self.query_dim.is_multiple_of(self.heads) || !self.target_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "{} heads must divide query width {} and target width {}",
                self.heads, self.query_dim, self.target_dim
            ));
        }
        if self.num_classes == 0 || self.num_predicates < 2 {
            return fail("need at least one class and two predicates".into());
        }
        Ok(())
    }
}
