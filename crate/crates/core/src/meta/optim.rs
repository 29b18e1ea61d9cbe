use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradMap, ParamSet, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = params.map_tensors(|t| Tensor::zeros(t.shape()));
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.step == other.step && self.m.bit_eq(&other.m) && self.v.bit_eq(&other.v)
    }
}

/// One bias-corrected Adam update. Returns detached parameters.
pub fn adam_step<T: Scalar>(
    params: &ParamSet<T>,
    grads: &GradMap<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<ParamSet<T>> {
    if state.m.len() != params.len() {
        return Err(Error::config("optimizer state does not match the parameter set"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of_f64(cfg.beta1), T::of_f64(cfg.beta2));
    let bc1 = T::of_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::of_f64(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of_f64(lr), T::of_f64(cfg.eps));

    let mut new_p = ParamSet::new(params.role());
    let mut new_m = ParamSet::new(params.role());
    let mut new_v = ParamSet::new(params.role());
    for (name, p) in params.iter() {
        let g = grads.req(name)?;
        let m = state.m.req(name)?;
        let v = state.v.req(name)?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::config(format!("optimizer shapes disagree for {name}")));
        }
        let n = p.numel();
        let (mut pd, mut md, mut vd) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
            let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            pd.push(p.data()[i] - lr * m_hat / (v_hat.sqrt() + eps));
            md.push(mi);
            vd.push(vi);
        }
        new_p.insert(name, Tensor::from_vec(p.shape(), pd)?)?;
        new_m.insert(name, Tensor::from_vec(p.shape(), md)?)?;
        new_v.insert(name, Tensor::from_vec(p.shape(), vd)?)?;
    }
    state.m = new_m;
    state.v = new_v;
    Ok(new_p)
}

/// Step decay: `base_lr · decayᵏ` with `k` the number of milestones ≤ `epoch`.
pub fn lr_schedule(epoch: f64, milestones: &[f64], base_lr: f64, decay: f64) -> f64 {
    let k = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * decay.powi(k as i32)
}

/// Warm-up weight of the hypernetwork update: 0 up to `m1`, 1 from `m2`,
/// linear in between.
pub fn switch_lambda(epoch: f64, m1: f64, m2: f64) -> f64 {
    if epoch <= m1 {
        0.0
    } else if epoch >= m2 {
        1.0
    } else {
        ((epoch - m1) / (m2 - m1)).clamp(0.0, 1.0)
    }
}
