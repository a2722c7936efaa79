//! Decoupled-weight-decay Adam with the non-decreasing second moment.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::spn::params::{load_tensors, save_tensors, ParamStore};
use crate::spn::SpnError;
use crate::tape::ParamId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr_base: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_base: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// `lr_base / ln(n)` with `n` clamped to at least `e`.
pub fn learning_rate(lr_base: f64, n: f64) -> f64 {
    lr_base / n.max(std::f64::consts::E).ln()
}

/// Moments per parameter tensor, indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub v_max: Vec<Array2<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.iter().map(|(_, t)| Array2::zeros(t.value.raw_dim())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros.clone(),
            v_max: zeros,
        }
    }

    pub fn save(&self, stem: &Path, store: &ParamStore) -> Result<(), SpnError> {
        let mut out = ParamStore::new();
        for (id, t) in store.iter() {
            out.push(format!("m.{}", t.name), self.m[id.0].clone());
            out.push(format!("v.{}", t.name), self.v[id.0].clone());
            out.push(format!("v_max.{}", t.name), self.v_max[id.0].clone());
        }
        save_tensors(stem, &out, &self.step)
    }

    pub fn load(stem: &Path, store: &ParamStore) -> Result<Self, SpnError> {
        let (saved, step): (ParamStore, u64) = load_tensors(stem)?;
        let mut state = Self::new(store);
        state.step = step;
        for (id, t) in store.iter() {
            for (prefix, slot) in [("m", &mut state.m), ("v", &mut state.v), ("v_max", &mut state.v_max)] {
                let name = format!("{prefix}.{}", t.name);
                let src = saved
                    .find(&name)
                    .ok_or_else(|| SpnError::Format(format!("optimizer state lacks {name}")))?;
                let value = saved.get(src);
                if value.shape() != t.value.shape() {
                    return Err(SpnError::Format(format!("optimizer tensor {name} has the wrong shape")));
                }
                slot[id.0] = value.clone();
            }
        }
        Ok(state)
    }
}

/// One update of every parameter with a gradient; returns the learning
/// rate used.
pub fn step(
    store: &mut ParamStore,
    grads: &HashMap<ParamId, Array2<f64>>,
    state: &mut OptimizerState,
    config: &AdamWConfig,
    n_edges: usize,
) -> f64 {
    state.step += 1;
    let lr = learning_rate(config.lr_base, n_edges as f64);
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let Some(g) = grads.get(&id) else { continue };
        let i = id.0;
        let p = store.get_mut(id);
        p.mapv_inplace(|w| w * (1.0 - lr * config.weight_decay));
        ndarray::Zip::from(p)
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .and(&mut state.v_max[i])
            .and(g)
            .for_each(|w, m, v, vm, &g| {
                *m = config.beta1 * *m + (1.0 - config.beta1) * g;
                *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
                *vm = vm.max(*v);
                let m_hat = *m / bc1;
                let v_hat = *vm / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + config.eps);
            });
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn learning_rate_rule() {
        let n = std::f64::consts::E.powi(2);
        assert!((n - 7.389).abs() < 1e-3);
        assert!((learning_rate(1e-3, n) - 5e-4).abs() < 1e-15);
        for n in [0.0, 1.0, 2.0] {
            assert_eq!(learning_rate(1e-3, n), 1e-3);
        }
        assert!(learning_rate(1e-3, 100.0) < 1e-3);
    }

    #[test]
    fn zero_gradient_without_decay_keeps_parameters() {
        let mut store = ParamStore::new();
        let id = store.push("w", array![[1.0, -2.0]]);
        let mut state = OptimizerState::new(&store);
        let config = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let grads = HashMap::from([(id, Array2::zeros((1, 2)))]);
        for _ in 0..5 {
            step(&mut store, &grads, &mut state, &config, 10);
        }
        assert_eq!(store.get(id), &array![[1.0, -2.0]]);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn max_second_moment_never_decreases() {
        let mut store = ParamStore::new();
        let id = store.push("w", array![[0.5]]);
        let mut state = OptimizerState::new(&store);
        let config = AdamWConfig::default();
        let mut prev = 0.0;
        for g in [3.0, 0.1, 0.0, 2.0, 0.0] {
            step(&mut store, &HashMap::from([(id, array![[g]])]), &mut state, &config, 3);
            let vm = state.v_max[0][[0, 0]];
            assert!(vm >= prev);
            prev = vm;
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut store = ParamStore::new();
        let id = store.push("w", array![[2.0]]);
        let mut state = OptimizerState::new(&store);
        let config = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        step(
            &mut store,
            &HashMap::from([(id, array![[0.0]])]),
            &mut state,
            &config,
            0,
        );
        assert!((store.get(id)[[0, 0]] - 2.0 * (1.0 - 1e-3 * 0.5)).abs() < 1e-15);
        assert_eq!(state.m[0][[0, 0]], 0.0);
    }

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        let id = store.push("a", array![[1.0, 2.0], [3.0, 4.0]]);
        let mut state = OptimizerState::new(&store);
        step(
            &mut store,
            &HashMap::from([(id, array![[0.3, -0.1], [0.7, 1e-9]])]),
            &mut state,
            &AdamWConfig::default(),
            9,
        );
        let stem = dir.path().join("opt");
        state.save(&stem, &store).unwrap();
        assert_eq!(OptimizerState::load(&stem, &store).unwrap(), state);
    }
}
