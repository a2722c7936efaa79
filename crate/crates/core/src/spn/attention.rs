//! Feature-wise attention on single vectors.
//!
//! The batched network evaluates the same arithmetic on the tape; these
//! per-vector forms are the reference the batched path is tested against.

use super::SpnError;
use crate::tape::softmax_in_place;

/// Softmax of the attention logits `g_a(query)`.
pub fn fat_weights(query: &[f64], target_dim: usize, g_a: impl Fn(&[f64]) -> Vec<f64>) -> Result<Vec<f64>, SpnError> {
    let mut w = g_a(query);
    if w.len() != target_dim {
        return Err(SpnError::Shape(format!(
            "attention logits have {} entries, target has {target_dim}",
            w.len()
        )));
    }
    softmax_in_place(&mut w);
    Ok(w)
}

/// `softmax(g_a(query)) ⊙ target`.
pub fn fat(query: &[f64], target: &[f64], g_a: impl Fn(&[f64]) -> Vec<f64>) -> Result<Vec<f64>, SpnError> {
    let w = fat_weights(query, target.len(), g_a)?;
    Ok(w.iter().zip(target).map(|(a, b)| a * b).collect())
}

/// Splits query and target into `heads.len()` contiguous chunks, applies
/// [`fat`] per head with that head's logit map and concatenates the results.
pub fn mfat<F: Fn(&[f64]) -> Vec<f64>>(query: &[f64], target: &[f64], heads: &[F]) -> Result<Vec<f64>, SpnError> {
    let h = heads.len();
    if h == 0 || !query.len().is_multiple_of(h) || !target.len().is_multiple_of(h) {
        return Err(SpnError::Shape(format!(
            "{h} heads do not divide query {} and target {}",
            query.len(),
            target.len()
        )));
    }
    let (qw, tw) = (query.len() / h, target.len() / h);
    let mut out = Vec::with_capacity(target.len());
    for (i, g_a) in heads.iter().enumerate() {
        out.extend(fat(&query[i * qw..(i + 1) * qw], &target[i * tw..(i + 1) * tw], g_a)?);
    }
    Ok(out)
}

/// Per-head weight vectors of [`mfat`], concatenated.
pub fn mfat_weights<F: Fn(&[f64]) -> Vec<f64>>(
    query: &[f64],
    target_dim: usize,
    heads: &[F],
) -> Result<Vec<f64>, SpnError> {
    let h = heads.len();
    if h == 0 || !query.len().is_multiple_of(h) || !target_dim.is_multiple_of(h) {
        return Err(SpnError::Shape(format!("{h} heads do not divide the inputs")));
    }
    let qw = query.len() / h;
    let mut out = Vec::with_capacity(target_dim);
    for (i, g_a) in heads.iter().enumerate() {
        out.extend(fat_weights(&query[i * qw..(i + 1) * qw], target_dim / h, g_a)?);
    }
    Ok(out)
}
