//! Line-per-frame stream files and ground-truth sidecars.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::labels::GroundTruth;
use super::DataError;
use crate::scene_map::{FrameUpdate, Point, SegmentId};

/// One stream line: points as `[x, y, z, nx, ny, nz, r, g, b]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamFrame {
    pub frame: u64,
    #[serde(default)]
    pub segments: BTreeMap<SegmentId, Vec<[f64; 9]>>,
    #[serde(default)]
    pub merges: Vec<(SegmentId, SegmentId)>,
    #[serde(default)]
    pub removed: Vec<SegmentId>,
}

impl From<&FrameUpdate> for StreamFrame {
    fn from(u: &FrameUpdate) -> Self {
        Self {
            frame: u.frame,
            segments: u
                .additions
                .iter()
                .map(|(id, pts)| (*id, pts.iter().map(Point::to_array).collect()))
                .collect(),
            merges: u.merges.clone(),
            removed: u.removals.clone(),
        }
    }
}

impl From<StreamFrame> for FrameUpdate {
    fn from(f: StreamFrame) -> Self {
        Self {
            frame: f.frame,
            additions: f
                .segments
                .into_iter()
                .map(|(id, pts)| (id, pts.into_iter().map(Point::from_array).collect()))
                .collect(),
            merges: f.merges,
            removals: f.removed,
        }
    }
}

pub fn write_stream(mut out: impl Write, frames: &[FrameUpdate]) -> std::io::Result<()> {
    for f in frames {
        serde_json::to_writer(&mut out, &StreamFrame::from(f))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Parses a stream; blank lines are ignored and the first malformed line
/// aborts with its 1-based number.
pub fn read_stream(input: impl BufRead) -> Result<Vec<FrameUpdate>, DataError> {
    let mut frames = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: StreamFrame = serde_json::from_str(&line).map_err(|e| DataError::Stream {
            line: i + 1,
            message: e.to_string(),
        })?;
        frames.push(f.into());
    }
    Ok(frames)
}

pub fn load_stream(path: &Path) -> Result<Vec<FrameUpdate>, DataError> {
    read_stream(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_stream(path: &Path, frames: &[FrameUpdate]) -> Result<(), DataError> {
    write_stream(std::io::BufWriter::new(std::fs::File::create(path)?), frames)?;
    Ok(())
}

pub fn save_ground_truth(path: &Path, gt: &GroundTruth) -> Result<(), DataError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, gt).map_err(|e| DataError::Format(e.to_string()))
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, DataError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    serde_json::from_reader(f).map_err(|e| DataError::Format(format!("{}: {e}", path.display())))
}

/// Stream and ground-truth paths of scene `index` in a dataset directory.
pub fn scene_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("scene_{index:03}.stream.jsonl")),
        dir.join(format!("scene_{index:03}.gt.json")),
    )
}

/// Writes scene `index` of a dataset.
pub fn save_scene(dir: &Path, index: usize, frames: &[FrameUpdate], gt: &GroundTruth) -> Result<(), DataError> {
    let (stream, truth) = scene_paths(dir, index);
    save_stream(&stream, frames)?;
    save_ground_truth(&truth, gt)
}

/// Every `scene_XXX` pair in `dir`, ordered by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, Vec<FrameUpdate>, GroundTruth)>, DataError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".stream.jsonl").map(str::to_owned))
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let stream = dir.join(format!("{name}.stream.jsonl"));
        let frames = load_stream(&stream).map_err(|e| match e {
            DataError::Stream { line, message } => DataError::Stream {
                line,
                message: format!("{}: {message}", stream.display()),
            },
            other => other,
        })?;
        let gt = load_ground_truth(&dir.join(format!("{name}.gt.json")))?;
        out.push((name, frames, gt));
    }
    Ok(out)
}
