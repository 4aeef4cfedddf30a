//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState<T> {
    /// Number of completed updates.
    pub step: u64,
    /// Indexed by [`ParamId::index`]; `None` until the parameter first
    /// receives a gradient.
    pub moments: Vec<Option<Moments<T>>>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: Vec::new(),
        }
    }
}

/// Applies one Adam update to every trainable parameter in `grads`.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) {
        return Err(config_err!("Adam betas must lie in [0, 1), got {:?}", cfg));
    }
    if !(cfg.eps > 0.0) {
        return Err(config_err!("Adam eps must be positive"));
    }
    state.step += 1;
    if state.moments.len() < params.len() {
        state.moments.resize(params.len(), None);
    }
    let t = state.step as i32;
    let bc1 = T::from_f64(1.0 - num_traits::Float::powi(cfg.beta1, t));
    let bc2 = T::from_f64(1.0 - num_traits::Float::powi(cfg.beta2, t));
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(cfg.eps));
    for (id, g) in grads {
        if params.kind(*id) != ParamKind::Trainable {
            continue;
        }
        let p = params.get_mut(*id);
        if p.shape() != g.shape() {
            return Err(config_err!(
                "gradient shape {:?} does not match parameter shape {:?}",
                g.shape(),
                p.shape()
            ));
        }
        let mom = state.moments[id.index()].get_or_insert_with(|| Moments {
            m: vec![T::zero(); g.len()],
            v: vec![T::zero(); g.len()],
        });
        for (((w, &gi), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mom.m.iter_mut())
            .zip(mom.v.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * gi;
            *v = b2 * *v + (T::one() - b2) * gi * gi;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
