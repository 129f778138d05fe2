//! ADAM with bias correction.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::Gradients;
use crate::nn::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One ADAM update. Parameters without a gradient are treated as having a
/// zero gradient. Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(shape_err(
            "adam",
            format!("state for {} params, store has {}", state.m.len(), params.len()),
        ));
    }
    for (id, name, p) in params.iter() {
        if let Some(g) = grads.get(id) {
            if g.shape() != p.shape() {
                return Err(shape_err(
                    "adam",
                    format!("gradient {:?} for `{}` {:?}", g.shape(), name, p.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    name: name.to_string(),
                });
            }
        }
    }

    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let bc1 = T::one() - T::from_f64(libm::pow(cfg.beta1, t));
    let bc2 = T::one() - T::from_f64(libm::pow(cfg.beta2, t));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.values_mut(id);
        match grads.get(id) {
            Some(g) => {
                for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p = *p - lr * mh / (vh.sqrt() + eps);
                }
            }
            None => {
                for ((p, m), v) in p.iter_mut().zip(m).zip(v) {
                    *m = b1 * *m;
                    *v = b2 * *v;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p = *p - lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
