//! MAML and HyperMAML: per-task adaptation, meta-gradients and updates.
//!
//! Every algorithm is expressed through the same pieces. A [`Model`] holds
//! the global parameters. Adaptation turns it plus a support set into an
//! [`AdaptedModel`]. The meta-gradient of an episode is the gradient of the
//! query loss of that adapted model with respect to the global parameters,
//! computed on a fresh tape per episode so episodes can run in parallel.

mod hyper;
mod maml;
mod optim;

use std::thread;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, EncoderConfig, HyperNetConfig, InitScheme};
use crate::tasks::Episode;
use crate::tensor::{grad, GradMap, ParamSet, Scalar, Tape, Tensor};

pub use hyper::{
    enhance_support, hyper_update, hypermaml_adapt, hypermaml_episode_grads, hypermaml_meta_gradient,
    hypermaml_meta_step, HyperMamlConfig, SwitchMode,
};
pub use maml::{maml_adapt, maml_episode_grads, maml_meta_gradient, maml_meta_step, MamlConfig};
pub use optim::{adam_step, lr_schedule, switch_lambda, AdamConfig, AdamState};

/// Global parameters: encoder γ, classifier head θ and, for HyperMAML,
/// the hypernetwork η.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub encoder_cfg: EncoderConfig,
    pub encoder: ParamSet<T>,
    pub head: ParamSet<T>,
    pub hyper: Option<HyperNet<T>>,
}

#[derive(Clone, Debug)]
pub struct HyperNet<T: Scalar = f32> {
    pub cfg: HyperNetConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(
        encoder_cfg: EncoderConfig,
        n_way: usize,
        hyper_cfg: Option<HyperNetConfig>,
        rng: &mut impl Rng,
        scheme: InitScheme,
    ) -> Result<Self> {
        let encoder = nn::build_encoder(&encoder_cfg, rng, scheme)?;
        let head = nn::build_head(encoder_cfg.output_dim(), n_way, rng, scheme)?;
        let hyper = match hyper_cfg {
            Some(cfg) => {
                if cfg.embed_dim != encoder_cfg.output_dim() || cfg.n_way != n_way {
                    return Err(Error::config(format!(
                        "hypernetwork expects {}-d embeddings and {} classes, model has {} and {n_way}",
                        cfg.embed_dim,
                        cfg.n_way,
                        encoder_cfg.output_dim()
                    )));
                }
                let params = nn::build_hypernetwork(&cfg, rng, scheme)?;
                Some(HyperNet { cfg, params })
            }
            None => None,
        };
        Ok(Self { encoder_cfg, encoder, head, hyper })
    }

    pub fn n_way(&self) -> usize {
        self.head.get("head.bias").map_or(0, Tensor::numel)
    }

    pub fn param_sets(&self) -> Vec<&ParamSet<T>> {
        let mut v = vec![&self.encoder, &self.head];
        if let Some(h) = &self.hyper {
            v.push(&h.params);
        }
        v
    }

    pub fn numel(&self) -> usize {
        self.param_sets().iter().map(|p| p.numel()).sum()
    }

    fn map_sets(&self, f: impl Fn(&ParamSet<T>) -> ParamSet<T>) -> Self {
        Self {
            encoder_cfg: self.encoder_cfg.clone(),
            encoder: f(&self.encoder),
            head: f(&self.head),
            hyper: self.hyper.as_ref().map(|h| HyperNet { cfg: h.cfg.clone(), params: f(&h.params) }),
        }
    }

    pub fn attach(&self, tape: &Tape<T>) -> Self {
        self.map_sets(|p| p.attach(tape))
    }

    pub fn detach(&self) -> Self {
        self.map_sets(ParamSet::detach)
    }

    pub fn is_attached(&self) -> bool {
        self.param_sets().iter().flat_map(|p| p.iter()).any(|(_, t)| t.is_attached())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            encoder_cfg: self.encoder_cfg.clone(),
            encoder: self.encoder.cast(),
            head: self.head.cast(),
            hyper: self.hyper.as_ref().map(|h| HyperNet { cfg: h.cfg.clone(), params: h.params.cast() }),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.encoder.bit_eq(&other.encoder)
            && self.head.bit_eq(&other.head)
            && match (&self.hyper, &other.hyper) {
                (Some(a), Some(b)) => a.params.bit_eq(&b.params),
                (None, None) => true,
                _ => false,
            }
    }
}

/// Gradient of a scalar with respect to every parameter of a [`Model`].
#[derive(Clone, Debug, Default)]
pub struct ModelGrads<T: Scalar = f32> {
    pub encoder: GradMap<T>,
    pub head: GradMap<T>,
    pub hyper: Option<GradMap<T>>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn accumulate(&mut self, other: &ModelGrads<T>) -> Result<()> {
        self.encoder.accumulate(&other.encoder)?;
        self.head.accumulate(&other.head)?;
        match (&mut self.hyper, &other.hyper) {
            (Some(a), Some(b)) => a.accumulate(b)?,
            (None, Some(b)) => self.hyper = Some(b.clone()),
            _ => {}
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> T {
        let sq = |g: &GradMap<T>| g.l2_norm().powi(2);
        (sq(&self.encoder) + sq(&self.head) + self.hyper.as_ref().map_or(T::zero(), sq)).sqrt()
    }
}

/// Gradients of `loss` with respect to the (tape-attached) parameters of `model`.
pub(crate) fn model_grads<T: Scalar>(loss: &Tensor<T>, model: &Model<T>) -> Result<ModelGrads<T>> {
    let sets = model.param_sets();
    let wrt: Vec<&Tensor<T>> = sets.iter().flat_map(|p| p.iter().map(|(_, t)| t)).collect();
    let mut flat = grad(loss, &wrt, false)?.into_iter();
    let mut take = |p: &ParamSet<T>| GradMap::from_pairs(p.names().map(|n| (n.to_string(), flat.next().expect("one gradient per parameter"))).collect());
    let encoder = take(&model.encoder);
    let head = take(&model.head);
    let hyper = model.hyper.as_ref().map(|h| take(&h.params));
    Ok(ModelGrads { encoder, head, hyper })
}

/// Mean cross-entropy of the head on encoded inputs.
pub(crate) fn xent<T: Scalar>(
    encoder_cfg: &EncoderConfig,
    encoder: &ParamSet<T>,
    head: &ParamSet<T>,
    x: &Tensor<T>,
    y: &[usize],
) -> Result<Tensor<T>> {
    let e = nn::encode(encoder_cfg, encoder, x)?;
    Ok(nn::classify(head, &e)?.softmax_xent(y)?)
}

pub(crate) fn check_finite<T: Scalar>(loss: &Tensor<T>, what: &'static str) -> Result<()> {
    if loss.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss(what))
    }
}

/// Task-specific parameters produced from a support set.
#[derive(Clone, Debug)]
pub struct AdaptedModel<T: Scalar = f32> {
    /// Encoder used for the query; equal to γ unless MAML adapts it.
    pub encoder: ParamSet<T>,
    /// Effective head θ'.
    pub head: ParamSet<T>,
    /// θ' − θ when the update came from the hypernetwork.
    pub delta: Option<ParamSet<T>>,
    /// Loss-blend warm-up: weight `p` and the gradient-adapted head whose
    /// predictions are mixed in with that weight.
    pub mixture: Option<(f64, ParamSet<T>)>,
}

impl<T: Scalar> AdaptedModel<T> {
    pub fn unadapted(model: &Model<T>) -> Self {
        Self { encoder: model.encoder.clone(), head: model.head.clone(), delta: None, mixture: None }
    }
}

/// Class probabilities for the query inputs; rows sum to one.
pub fn predict_query<T: Scalar>(encoder_cfg: &EncoderConfig, model: &AdaptedModel<T>, query_x: &Tensor<T>) -> Result<Tensor<T>> {
    let e = nn::encode(encoder_cfg, &model.encoder, query_x)?;
    let probs = nn::classify(&model.head, &e)?.softmax_rows()?;
    match &model.mixture {
        Some((p, other)) => {
            let q = nn::classify(other, &e)?.softmax_rows()?;
            Ok(q.scale(T::of_f64(*p))?.add(&probs.scale(T::of_f64(1.0 - p))?)?)
        }
        None => Ok(probs),
    }
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> f64 {
    let pred = probs.argmax_rows();
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// Which adaptation rule to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Algorithm {
    Maml(MamlConfig),
    HyperMaml(HyperMamlConfig),
}

impl Algorithm {
    /// Adapts `model` to the support set of `episode`. `lambda` is the
    /// warm-up weight and is ignored by MAML.
    pub fn adapt<T: Scalar>(&self, model: &Model<T>, episode: &Episode<T>, lambda: f64) -> Result<AdaptedModel<T>> {
        match self {
            Algorithm::Maml(cfg) => {
                let (encoder, head) =
                    maml_adapt(&model.encoder_cfg, &model.encoder, &model.head, &episode.support_x, &episode.support_y, cfg)?;
                Ok(AdaptedModel { encoder, head, delta: None, mixture: None })
            }
            Algorithm::HyperMaml(cfg) => hypermaml_adapt(model, &episode.support_x, &episode.support_y, cfg, lambda),
        }
    }

    /// Query accuracy after adapting to the support set.
    pub fn episode_accuracy<T: Scalar>(&self, model: &Model<T>, episode: &Episode<T>, lambda: f64) -> Result<f64> {
        let adapted = self.adapt(model, episode, lambda)?;
        let probs = predict_query(&model.encoder_cfg, &adapted, &episode.query_x)?;
        Ok(accuracy(&probs, &episode.query_y))
    }

    pub fn meta_lr(&self) -> f64 {
        match self {
            Algorithm::Maml(c) => c.meta_lr,
            Algorithm::HyperMaml(c) => c.meta_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Algorithm::Maml(c) => c.validate(),
            Algorithm::HyperMaml(c) => c.validate(),
        }
    }

    /// Summed query loss and meta-gradient over `episodes`.
    pub fn meta_gradient<T: Scalar>(
        &self,
        model: &Model<T>,
        episodes: &[Episode<T>],
        lambda: f64,
        threads: usize,
    ) -> Result<(f64, ModelGrads<T>)> {
        match self {
            Algorithm::Maml(cfg) => maml_meta_gradient(model, episodes, cfg, threads),
            Algorithm::HyperMaml(cfg) => hypermaml_meta_gradient(model, episodes, cfg, lambda, threads),
        }
    }
}

/// Runs `per_episode` over `episodes`, on up to `threads` workers, and sums
/// losses and gradients in episode order so the result does not depend on
/// the thread count.
pub(crate) fn sum_over_episodes<T: Scalar, F>(episodes: &[Episode<T>], threads: usize, per_episode: F) -> Result<(f64, ModelGrads<T>)>
where
    F: Fn(&Episode<T>) -> Result<(f64, ModelGrads<T>)> + Sync,
{
    if episodes.is_empty() {
        return Err(Error::config("meta-batch is empty"));
    }
    let threads = threads.clamp(1, episodes.len());
    let results: Vec<Result<(f64, ModelGrads<T>)>> = if threads == 1 {
        episodes.iter().map(&per_episode).collect()
    } else {
        let chunk = episodes.len().div_ceil(threads);
        thread::scope(|s| {
            let handles: Vec<_> = episodes
                .chunks(chunk)
                .map(|c| s.spawn(|| c.iter().map(&per_episode).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("episode worker panicked")).collect()
        })
    };
    let mut total = 0.0;
    let mut grads = ModelGrads::default();
    for r in results {
        let (loss, g) = r?;
        total += loss;
        grads.accumulate(&g)?;
    }
    Ok((total, grads))
}

/// Adam moments for every parameter set of a [`Model`].
#[derive(Clone, Debug)]
pub struct ModelOptimizer<T: Scalar = f32> {
    pub cfg: AdamConfig,
    pub encoder: AdamState<T>,
    pub head: AdamState<T>,
    pub hyper: Option<AdamState<T>>,
}

impl<T: Scalar> ModelOptimizer<T> {
    pub fn new(model: &Model<T>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            encoder: AdamState::new(&model.encoder),
            head: AdamState::new(&model.head),
            hyper: model.hyper.as_ref().map(|h| AdamState::new(&h.params)),
        }
    }

    /// Applies one update to every parameter set of `model`.
    pub fn step(&mut self, model: &mut Model<T>, grads: &ModelGrads<T>, lr: f64) -> Result<()> {
        model.encoder = adam_step(&model.encoder, &grads.encoder, &mut self.encoder, lr, &self.cfg)?;
        model.head = adam_step(&model.head, &grads.head, &mut self.head, lr, &self.cfg)?;
        if let (Some(h), Some(state)) = (model.hyper.as_mut(), self.hyper.as_mut()) {
            let g = grads.hyper.as_ref().ok_or_else(|| Error::config("missing hypernetwork gradient"))?;
            h.params = adam_step(&h.params, g, state, lr, &self.cfg)?;
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.encoder.bit_eq(&other.encoder)
            && self.head.bit_eq(&other.head)
            && match (&self.hyper, &other.hyper) {
                (Some(a), Some(b)) => a.bit_eq(b),
                (None, None) => true,
                _ => false,
            }
    }
}
