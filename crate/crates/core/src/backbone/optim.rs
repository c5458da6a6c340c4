//! Adam with bias correction and a constant learning rate.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, aligned with the parameter traversal order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar, P: ParamSet<T>>(params: &P) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

pub fn adam_step<T: Scalar, P: ParamSet<T>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    grads.check_finite("gradient")?;
    let grads = grads.named_tensors();
    let tensors = params.named_tensors_mut();
    if tensors.len() != state.m.len() || tensors.len() != grads.len() {
        return Err(Error::Invalid("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, ((name, p), (_, g))) in tensors.into_iter().zip(grads).enumerate() {
        if p.len() != state.m[i].len() {
            return Err(Error::Invalid(format!("optimizer state shape mismatch for {name}")));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, gv)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            let gv = gv.widen();
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gv;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gv * gv;
            let update = cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *w = T::narrow(w.widen() - update);
        }
    }
    Ok(())
}
