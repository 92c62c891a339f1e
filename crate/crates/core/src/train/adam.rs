use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{contract_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn for_params(params: &ParamStore<T>) -> Result<Self> {
        let zeros = || -> Result<Vec<Tensor<T>>> { params.iter().map(|p| Tensor::zeros(p.value.shape())).collect() };
        Ok(Self {
            m: zeros()?,
            v: zeros()?,
            t: 0,
        })
    }
}

/// One bias-corrected Adam update of `value` given `grad`, at step `t ≥ 1`.
pub fn adam_step<T: Real>(
    value: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(contract_err!("Adam step counter starts at 1"));
    }
    if grad.shape() != value.shape() || m.shape() != value.shape() || v.shape() != value.shape() {
        return Err(contract_err!(
            "Adam state {:?}/{:?} and gradient {:?} must match parameter {:?}",
            m.shape(),
            v.shape(),
            grad.shape(),
            value.shape()
        ));
    }
    let ti = i32::try_from(t).unwrap_or(i32::MAX);
    let bc1 = T::of(1.0 - cfg.beta1.powi(ti));
    let bc2 = T::of(1.0 - cfg.beta2.powi(ti));
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let iter = value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
    for ((p, &g), (mi, vi)) in iter {
        *mi = b1 * *mi + one_b1 * g;
        *vi = b2 * *vi + one_b2 * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Applies one Adam step to every parameter using its accumulated gradient.
pub fn adam_update<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(contract_err!(
            "optimizer state holds {} tensors for {} parameters",
            state.m.len(),
            params.len()
        ));
    }
    state.t += 1;
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        adam_step(&mut p.value, &p.grad, m, v, cfg, state.t)?;
    }
    Ok(())
}
