use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update using the gradients currently held in
/// `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::config(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    if state.m.len() != store.len() {
        return Err(Error::dim("optimizer state does not match parameter store"));
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for id in store.ids().collect::<Vec<_>>() {
        let i = id.index();
        let tensor = store.get_mut(id);
        let grad = tensor.grad().map(<[f64]>::to_vec).unwrap_or_default();
        if grad.len() != state.m[i].len() {
            return Err(Error::dim(format!("optimizer state shape for `{i}`")));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, g), m), v) in tensor.values_mut().iter_mut().zip(&grad).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !tensor.is_finite() {
            return Err(Error::Numeric(format!("adam update of parameter {i}")));
        }
    }
    Ok(())
}
