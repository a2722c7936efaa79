//! Incremental 3D scene graph prediction over segmented point-cloud streams.

pub mod datagen;
pub mod eval;
pub mod fusion;
pub mod metrics;
pub mod neighbor_graph;
pub mod pipeline;
pub mod scene_map;
pub mod spn;
pub mod tape;
pub mod train;
