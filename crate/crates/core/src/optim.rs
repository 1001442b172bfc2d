//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First moments, one buffer per parameter.
    pub m: Vec<Vec<f64>>,
    /// Second moments, one buffer per parameter.
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| vec![0.0; t.numel()])
                .collect::<Vec<_>>()
        };
        AdamState {
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update of every parameter in `store`.
///
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} tensors, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for id in store.ids() {
        let g = grads.get(id);
        if g.len() != store.get(id).numel() || state.m[id.index()].len() != g.len() {
            return Err(Error::shape("adam_step", store.get(id).shape(), &[g.len()]));
        }
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at element {pos} is {}",
                store.name(id),
                g[pos]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, tensor) in store.tensors_mut().iter_mut().enumerate() {
        let g = grads.get(crate::params::ParamId(i));
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
