use serde::{Deserialize, Serialize};

use super::{check_finite, model_grads, sum_over_episodes, xent, Model, ModelGrads, ModelOptimizer};
use crate::error::{Error, Result};
use crate::nn::EncoderConfig;
use crate::tasks::Episode;
use crate::tensor::{grad, ParamSet, Scalar, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MamlConfig {
    /// Inner-loop step size α.
    pub inner_lr: f64,
    pub inner_steps: usize,
    /// Treat the inner-loop gradients as constants in the meta-gradient.
    pub first_order: bool,
    /// Adapt only the head and keep the encoder fixed per task.
    pub head_only: bool,
    /// Outer-loop step size β.
    pub meta_lr: f64,
}

impl Default for MamlConfig {
    fn default() -> Self {
        Self { inner_lr: 0.01, inner_steps: 5, first_order: false, head_only: false, meta_lr: 1e-3 }
    }
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::config(format!("inner_lr must be finite and non-negative, got {}", self.inner_lr)));
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            return Err(Error::config(format!("meta_lr must be positive, got {}", self.meta_lr)));
        }
        Ok(())
    }
}

fn is_attached<T: Scalar>(p: &ParamSet<T>) -> bool {
    p.iter().any(|(_, t)| t.is_attached())
}

/// One step `θ ← θ − α∇L_S(θ)` over the head, and the encoder unless
/// `head_only`. Detached inputs are differentiated on a private tape and
/// come back detached.
pub(crate) fn gradient_step<T: Scalar>(
    encoder_cfg: &EncoderConfig,
    encoder: &ParamSet<T>,
    head: &ParamSet<T>,
    x: &Tensor<T>,
    y: &[usize],
    alpha: T,
    head_only: bool,
    create_graph: bool,
) -> Result<(ParamSet<T>, ParamSet<T>)> {
    if !is_attached(head) {
        let tape = Tape::new();
        let (e, h) = gradient_step(encoder_cfg, &encoder.attach(&tape), &head.attach(&tape), x, y, alpha, head_only, false)?;
        return Ok((e.detach(), h.detach()));
    }
    let loss = xent(encoder_cfg, encoder, head, x, y)?;
    check_finite(&loss, "inner loop")?;
    let mut wrt: Vec<&Tensor<T>> = head.iter().map(|(_, t)| t).collect();
    if !head_only {
        wrt.extend(encoder.iter().map(|(_, t)| t));
    }
    let grads = grad(&loss, &wrt, create_graph)?;
    let nh = head.len();
    let step = |p: &ParamSet<T>, g: &[Tensor<T>]| -> Result<ParamSet<T>> {
        let mut out = ParamSet::new(p.role());
        for ((name, t), g) in p.iter().zip(g) {
            out.insert(name, t.sub(&g.scale(alpha)?)?)?;
        }
        Ok(out)
    };
    let new_head = step(head, &grads[..nh])?;
    let new_encoder = if head_only { encoder.clone() } else { step(encoder, &grads[nh..])? };
    Ok((new_encoder, new_head))
}

/// Runs `inner_steps` gradient steps on the support set. With tape-attached
/// parameters and `first_order` unset, the result stays differentiable with
/// respect to the original parameters through every step.
pub fn maml_adapt<T: Scalar>(
    encoder_cfg: &EncoderConfig,
    encoder: &ParamSet<T>,
    head: &ParamSet<T>,
    support_x: &Tensor<T>,
    support_y: &[usize],
    cfg: &MamlConfig,
) -> Result<(ParamSet<T>, ParamSet<T>)> {
    let (mut e, mut h) = (encoder.clone(), head.clone());
    let alpha = T::of_f64(cfg.inner_lr);
    for _ in 0..cfg.inner_steps {
        (e, h) = gradient_step(encoder_cfg, &e, &h, support_x, support_y, alpha, cfg.head_only, !cfg.first_order)?;
    }
    Ok((e, h))
}

/// Query loss after adaptation and its gradient with respect to `model`.
pub fn maml_episode_grads<T: Scalar>(model: &Model<T>, episode: &Episode<T>, cfg: &MamlConfig) -> Result<(f64, ModelGrads<T>)> {
    let tape = Tape::new();
    let m = model.attach(&tape);
    let (e, h) = maml_adapt(&m.encoder_cfg, &m.encoder, &m.head, &episode.support_x, &episode.support_y, cfg)?;
    let loss = xent(&m.encoder_cfg, &e, &h, &episode.query_x, &episode.query_y)?;
    check_finite(&loss, "meta-objective")?;
    Ok((loss.item().as_f64(), model_grads(&loss, &m)?))
}

/// Summed query loss over the batch and its gradient.
pub fn maml_meta_gradient<T: Scalar>(
    model: &Model<T>,
    episodes: &[Episode<T>],
    cfg: &MamlConfig,
    threads: usize,
) -> Result<(f64, ModelGrads<T>)> {
    sum_over_episodes(episodes, threads, |ep| maml_episode_grads(model, ep, cfg))
}

/// One outer-loop update; returns the summed query loss before the update.
pub fn maml_meta_step<T: Scalar>(
    model: &mut Model<T>,
    episodes: &[Episode<T>],
    cfg: &MamlConfig,
    opt: &mut ModelOptimizer<T>,
    lr: f64,
    threads: usize,
) -> Result<f64> {
    let (loss, grads) = maml_meta_gradient(model, episodes, cfg, threads)?;
    opt.step(model, &grads, lr)?;
    Ok(loss)
}
