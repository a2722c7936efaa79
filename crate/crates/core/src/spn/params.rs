//! Named parameter tensors and the checkpoint format.
//!
//! A checkpoint is a JSON manifest (`<stem>.json`) listing every tensor's
//! name, shape, dtype and byte offset, next to a flat blob (`<stem>.bin`) of
//! little-endian `f64` values in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SpnError;
use crate::tape::ParamId;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Array2<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.tensors.push(NamedTensor {
            name: name.into(),
            value,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.tensors[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NamedTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Replaces all values with those of `other`; names and shapes must match.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), SpnError> {
        if other.len() != self.len() {
            return Err(SpnError::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(SpnError::Shape(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    theirs.name,
                    theirs.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
            mine.value.assign(&theirs.value);
        }
        Ok(())
    }
}

/// Weights of one fully connected map `y = x·Wᵀ + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..=bound));
        let weight = store.push(format!("{name}.weight"), w);
        let bias = store.push(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }
}

/// Fully connected layers with ReLU between consecutive layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists the input width followed by each layer's output width.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest<M> {
    format: String,
    version: u32,
    meta: M,
    tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "sgf-tensors";

fn stem_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `store` as `<stem>.json` + `<stem>.bin` with `meta` embedded in
/// the manifest.
pub fn save_tensors<M: Serialize>(stem: &Path, store: &ParamStore, meta: &M) -> Result<(), SpnError> {
    let (json_path, bin_path) = stem_paths(stem);
    let mut blob = Vec::with_capacity(store.scalar_count() * 8);
    let mut entries = Vec::with_capacity(store.len());
    for (_, t) in store.iter() {
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.value.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len(),
        });
        for v in t.value.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        meta,
        tensors: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| SpnError::Format(e.to_string()))?;
    fs::write(&json_path, text)?;
    fs::write(&bin_path, blob)?;
    Ok(())
}

pub fn load_tensors<M: for<'de> Deserialize<'de>>(stem: &Path) -> Result<(ParamStore, M), SpnError> {
    let (json_path, bin_path) = stem_paths(stem);
    let text = fs::read_to_string(&json_path)?;
    let manifest: Manifest<M> = serde_json::from_str(&text).map_err(|e| SpnError::Format(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(SpnError::Format(format!("unexpected format {}", manifest.format)));
    }
    let blob = fs::read(&bin_path)?;
    let mut store = ParamStore::new();
    for entry in manifest.tensors {
        if entry.dtype != "f64" || entry.shape.len() != 2 {
            return Err(SpnError::Format(format!("unsupported tensor {}", entry.name)));
        }
        let n = entry.shape[0] * entry.shape[1];
        let end = entry.offset + n * 8;
        let bytes = blob
            .get(entry.offset..end)
            .ok_or_else(|| SpnError::Format(format!("tensor {} exceeds blob", entry.name)))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), data)
            .map_err(|e| SpnError::Format(e.to_string()))?;
        store.push(entry.name, value);
    }
    Ok((store, manifest.meta))
}
