use serde::{Deserialize, Serialize};

use super::{check_finite, model_grads, sum_over_episodes, AdaptedModel, Model, ModelGrads, ModelOptimizer};
use crate::error::{Error, Result};
use crate::nn::{self, HyperNetConfig};
use crate::tasks::Episode;
use crate::tensor::{grad, ParamSet, Scalar, Tape, Tensor, TensorError};

/// How the warm-up mixes the gradient step with the hypernetwork.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchMode {
    /// `θ' = θ + λ·Δθ − (1 − λ)·α∇θ L_S`.
    #[default]
    UpdateBlend,
    /// Train on `p·L(θ − α∇θ L_S) + (1 − p)·L(θ + Δθ)` with `p = 1 − λ`.
    LossBlend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperMamlConfig {
    pub hypernet: HyperNetConfig,
    /// Warm-up milestones `(m₁, m₂)` in epochs. `None` disables the
    /// warm-up: the hypernetwork update is used from the start. Serialized
    /// as `[m1, m2]`, or `[]` when disabled.
    #[serde(with = "warmup_serde")]
    pub warmup: Option<[f64; 2]>,
    pub switch_mode: SwitchMode,
    /// Step size α of the warm-up gradient term.
    pub warmup_lr: f64,
    /// Treat the warm-up gradient as a constant in the meta-gradient.
    pub first_order: bool,
    pub meta_lr: f64,
}

impl Default for HyperMamlConfig {
    fn default() -> Self {
        Self {
            hypernet: HyperNetConfig::default(),
            warmup: Some([51.0, 550.0]),
            switch_mode: SwitchMode::UpdateBlend,
            warmup_lr: 0.01,
            first_order: false,
            meta_lr: 1e-3,
        }
    }
}

mod warmup_serde {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(w: &Option<[f64; 2]>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(w.iter().flatten())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<[f64; 2]>, D::Error> {
        match Vec::<f64>::deserialize(d)?.as_slice() {
            [] => Ok(None),
            &[m1, m2] => Ok(Some([m1, m2])),
            other => Err(D::Error::custom(format!("warmup takes two milestones or none, got {}", other.len()))),
        }
    }
}

impl HyperMamlConfig {
    pub fn validate(&self) -> Result<()> {
        self.hypernet.validate()?;
        if let Some([m1, m2]) = self.warmup {
            if !(m1 < m2) || m1 < 0.0 {
                return Err(Error::config(format!("warm-up milestones must satisfy 0 ≤ m1 < m2, got ({m1}, {m2})")));
            }
        }
        if !(self.warmup_lr >= 0.0 && self.warmup_lr.is_finite()) {
            return Err(Error::config("warmup_lr must be finite and non-negative"));
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            return Err(Error::config("meta_lr must be positive"));
        }
        Ok(())
    }

    /// Warm-up weight λ at `epoch`.
    pub fn lambda(&self, epoch: f64) -> f64 {
        match self.warmup {
            Some([m1, m2]) => super::switch_lambda(epoch, m1, m2),
            None => 1.0,
        }
    }
}

/// Per-class hypernetwork input: mean embedding ⊕ mean prediction ⊕
/// one-hot label, one row per class. Without `predictions` the middle
/// block is omitted.
pub fn enhance_support<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    predictions: Option<&Tensor<T>>,
    n_way: usize,
) -> Result<Tensor<T>> {
    let rows = embeddings.shape()[0];
    if labels.len() != rows {
        return Err(TensorError::ShapeMismatch { op: "enhance_support", lhs: embeddings.shape().to_vec(), rhs: vec![labels.len()] }.into());
    }
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(Error::Task(format!("support label {l} outside 0..{n_way}")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Task(format!("class {c} is missing from the support set")));
    }
    let mut avg = vec![T::zero(); n_way * rows];
    for (i, &l) in labels.iter().enumerate() {
        avg[l * rows + i] = T::one() / T::of_usize(counts[l]);
    }
    let avg = Tensor::from_vec(&[n_way, rows], avg)?;
    let mut out = avg.matmul(embeddings)?;
    if let Some(p) = predictions {
        out = out.concat_cols(&avg.matmul(&p.detach())?)?;
    }
    Ok(out.concat_cols(&Tensor::eye(n_way))?)
}

/// Applies the hypernetwork to the enhanced rows. Row `c` of its output is
/// the update of head column `c` followed by the update of bias `c`.
/// Returns `(θ + Δθ, Δθ)`.
pub fn hyper_update<T: Scalar>(
    head: &ParamSet<T>,
    enhanced: &Tensor<T>,
    hyper: &ParamSet<T>,
) -> Result<(ParamSet<T>, ParamSet<T>)> {
    let w = head.req("head.weight")?;
    let b = head.req("head.bias")?;
    let (d, n) = (w.shape()[0], w.shape()[1]);
    let out = nn::hypernet_forward(hyper, enhanced)?;
    if out.shape() != [n, d + 1] {
        return Err(TensorError::ShapeMismatch { op: "hyper_update", lhs: out.shape().to_vec(), rhs: vec![n, d + 1] }.into());
    }
    let dw = out.slice_cols(0, d)?.transpose()?;
    let db = out.slice_cols(d, 1)?.reshape(&[n])?;
    let delta = ParamSet::new(head.role()).with("head.weight", dw.clone())?.with("head.bias", db.clone())?;
    let adapted = ParamSet::new(head.role()).with("head.weight", w.add(&dw)?)?.with("head.bias", b.add(&db)?)?;
    Ok((adapted, delta))
}

fn add_sets<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>) -> Result<ParamSet<T>> {
    let mut out = ParamSet::new(a.role());
    for (name, t) in a.iter() {
        out.insert(name, t.add(b.req(name)?)?)?;
    }
    Ok(out)
}

/// Adapts the head to a support set with the hypernetwork, blended with a
/// one-step gradient update during warm-up (`λ < 1`).
pub fn hypermaml_adapt<T: Scalar>(
    model: &Model<T>,
    support_x: &Tensor<T>,
    support_y: &[usize],
    cfg: &HyperMamlConfig,
    lambda: f64,
) -> Result<AdaptedModel<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("λ must lie in [0, 1], got {lambda}")));
    }
    if lambda < 1.0 && !model.is_attached() {
        let tape = Tape::new();
        let a = adapt(&model.attach(&tape), support_x, support_y, cfg, lambda, false)?;
        return Ok(AdaptedModel {
            encoder: a.encoder.detach(),
            head: a.head.detach(),
            delta: a.delta.map(|d| d.detach()),
            mixture: a.mixture.map(|(p, h)| (p, h.detach())),
        });
    }
    adapt(model, support_x, support_y, cfg, lambda, !cfg.first_order)
}

fn adapt<T: Scalar>(
    model: &Model<T>,
    support_x: &Tensor<T>,
    support_y: &[usize],
    cfg: &HyperMamlConfig,
    lambda: f64,
    create_graph: bool,
) -> Result<AdaptedModel<T>> {
    let hyper = model.hyper.as_ref().ok_or_else(|| Error::config("HyperMAML needs a hypernetwork"))?;
    let n_way = model.n_way();
    let head = &model.head;
    let e_s = nn::encode(&model.encoder_cfg, &model.encoder, support_x)?;

    let hyper_part = if lambda > 0.0 {
        let preds = if hyper.cfg.enhancement {
            Some(nn::classify(&head.detach(), &e_s.detach())?.softmax_rows()?)
        } else {
            None
        };
        let enhanced = enhance_support(&e_s, support_y, preds.as_ref(), n_way)?;
        Some(hyper_update(head, &enhanced, &hyper.params)?)
    } else {
        None
    };

    let grads = if lambda < 1.0 {
        let loss = nn::classify(head, &e_s)?.softmax_xent(support_y)?;
        check_finite(&loss, "warm-up gradient step")?;
        let wrt: Vec<&Tensor<T>> = head.iter().map(|(_, t)| t).collect();
        Some(grad(&loss, &wrt, create_graph)?)
    } else {
        None
    };
    let step_with = |scale: T| -> Result<ParamSet<T>> {
        let g = grads.as_ref().expect("gradient computed when λ < 1");
        let mut out = ParamSet::new(head.role());
        for ((name, t), g) in head.iter().zip(g) {
            out.insert(name, t.sub(&g.scale(scale)?)?)?;
        }
        Ok(out)
    };
    let alpha = cfg.warmup_lr;
    let encoder = model.encoder.clone();

    let (head, delta, mixture) = match (hyper_part, cfg.switch_mode) {
        (Some((h, d)), _) if lambda == 1.0 => (h, Some(d), None),
        (None, _) => (step_with(T::of_f64(alpha))?, None, None),
        (Some((_, d)), SwitchMode::UpdateBlend) => {
            let g = grads.as_ref().expect("gradient computed when λ < 1");
            let (l, ga) = (T::of_f64(lambda), T::of_f64((1.0 - lambda) * alpha));
            let mut blend = ParamSet::new(head.role());
            for ((name, dh), g) in d.iter().zip(g) {
                blend.insert(name, dh.scale(l)?.sub(&g.scale(ga)?)?)?;
            }
            (add_sets(head, &blend)?, Some(blend), None)
        }
        (Some((h, d)), SwitchMode::LossBlend) => (h, Some(d), Some((1.0 - lambda, step_with(T::of_f64(alpha))?))),
    };
    Ok(AdaptedModel { encoder, head, delta, mixture })
}

/// Query loss of the adapted model and its gradient with respect to γ, θ and η.
pub fn hypermaml_episode_grads<T: Scalar>(
    model: &Model<T>,
    episode: &Episode<T>,
    cfg: &HyperMamlConfig,
    lambda: f64,
) -> Result<(f64, ModelGrads<T>)> {
    let tape = Tape::new();
    let m = model.attach(&tape);
    let adapted = hypermaml_adapt(&m, &episode.support_x, &episode.support_y, cfg, lambda)?;
    let e_q = nn::encode(&m.encoder_cfg, &m.encoder, &episode.query_x)?;
    let main = nn::classify(&adapted.head, &e_q)?.softmax_xent(&episode.query_y)?;
    let loss = match &adapted.mixture {
        Some((p, gh)) => {
            let other = nn::classify(gh, &e_q)?.softmax_xent(&episode.query_y)?;
            main.scale(T::of_f64(1.0 - p))?.add(&other.scale(T::of_f64(*p))?)?
        }
        None => main,
    };
    check_finite(&loss, "meta-objective")?;
    Ok((loss.item().as_f64(), model_grads(&loss, &m)?))
}

pub fn hypermaml_meta_gradient<T: Scalar>(
    model: &Model<T>,
    episodes: &[Episode<T>],
    cfg: &HyperMamlConfig,
    lambda: f64,
    threads: usize,
) -> Result<(f64, ModelGrads<T>)> {
    sum_over_episodes(episodes, threads, |ep| hypermaml_episode_grads(model, ep, cfg, lambda))
}

/// One joint update of γ, θ and η; returns the summed query loss.
pub fn hypermaml_meta_step<T: Scalar>(
    model: &mut Model<T>,
    episodes: &[Episode<T>],
    cfg: &HyperMamlConfig,
    lambda: f64,
    opt: &mut ModelOptimizer<T>,
    lr: f64,
    threads: usize,
) -> Result<f64> {
    let (loss, grads) = hypermaml_meta_gradient(model, episodes, cfg, lambda, threads)?;
    opt.step(model, &grads, lr)?;
    Ok(loss)
}
