//! Networks: encoders, the linear classifier head and the hypernetwork.
//!
//! Parameters live in [`ParamSet`]s and the forward functions are free
//! functions of `(config, params, input)`, so the same code runs on detached
//! parameters for inference and on tape-attached ones for training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::tensor::{ParamRole, ParamSet};
use crate::tensor::{ConvGeom, Scalar, Tensor};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    /// Identity on flat inputs; the 2-D toy feeds raw coordinates to the head.
    Linear2d,
    /// Two dense ReLU layers.
    Mlp,
    /// Four `conv3×3 → batch norm → relu → maxpool2×2` blocks.
    Conv4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Per-example input shape: `[d]` for flat inputs, `[C, H, W]` for images.
    pub input_shape: Vec<usize>,
    /// Output width of the MLP encoder. Conv4 always emits `channels`.
    pub embed_dim: usize,
    /// Conv4 channel width, or MLP hidden width.
    pub channels: usize,
    pub batch_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { variant: EncoderVariant::Conv4, input_shape: vec![1, 28, 28], embed_dim: 64, channels: 64, batch_norm: true }
    }
}

impl EncoderConfig {
    pub fn linear2d() -> Self {
        Self { variant: EncoderVariant::Linear2d, input_shape: vec![2], embed_dim: 2, channels: 0, batch_norm: false }
    }

    pub fn conv4(input_shape: &[usize], channels: usize) -> Self {
        Self { variant: EncoderVariant::Conv4, input_shape: input_shape.to_vec(), embed_dim: channels, channels, batch_norm: true }
    }

    pub fn mlp(input_dim: usize, hidden: usize, embed_dim: usize) -> Self {
        Self { variant: EncoderVariant::Mlp, input_shape: vec![input_dim], embed_dim, channels: hidden, batch_norm: false }
    }

    fn flat_input(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Spatial size after each of the four pooling stages.
    pub fn conv4_trace(&self) -> Result<Vec<(usize, usize)>> {
        let [_, mut h, mut w] = self.input_shape[..] else {
            return Err(Error::config(format!("conv4 needs a [C, H, W] input shape, got {:?}", self.input_shape)));
        };
        let mut trace = Vec::with_capacity(4);
        for stage in 0..4 {
            if h < 2 || w < 2 {
                return Err(Error::config(format!(
                    "input {:?} is too small for four pooling stages (stage {stage} sees {h}x{w})",
                    self.input_shape
                )));
            }
            h /= 2;
            w /= 2;
            trace.push((h, w));
        }
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        match self.variant {
            EncoderVariant::Linear2d => {
                if self.input_shape.len() != 1 || self.input_shape[0] == 0 {
                    return Err(Error::config("linear2d encoder needs a flat, non-empty input shape"));
                }
            }
            EncoderVariant::Mlp => {
                if self.flat_input() == 0 || self.channels == 0 || self.embed_dim == 0 {
                    return Err(Error::config("mlp encoder widths must be positive"));
                }
            }
            EncoderVariant::Conv4 => {
                if self.channels == 0 {
                    return Err(Error::config("conv4 channel width must be positive"));
                }
                self.conv4_trace()?;
            }
        }
        Ok(())
    }

    /// Width of the embedding the encoder produces.
    pub fn output_dim(&self) -> usize {
        match self.variant {
            EncoderVariant::Linear2d => self.flat_input(),
            EncoderVariant::Mlp => self.embed_dim,
            EncoderVariant::Conv4 => self.channels,
        }
    }
}

/// How weight matrices and kernels are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `U(−b, b)` with `b = √(6 / fan_in)`, i.e. standard deviation `√(2 / fan_in)`.
    #[default]
    KaimingUniform,
    /// `U(−b, b)` with `b = √(6 / (fan_in + fan_out))`.
    XavierUniform,
    Zeros,
}

impl InitScheme {
    /// Standard deviation the scheme targets for a weight of the given fans.
    pub fn target_std(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Self::KaimingUniform => (2.0 / fan_in as f64).sqrt(),
            Self::XavierUniform => (2.0 / (fan_in + fan_out) as f64).sqrt(),
            Self::Zeros => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight { fan_in: usize, fan_out: usize },
    Bias,
    BnScale,
    BnShift,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), kind: ParamKind::Weight { fan_in, fan_out } }
    }

    pub fn other(name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), kind }
    }
}

/// Draws parameters: weights by `scheme`, biases and batch-norm shifts zero,
/// batch-norm scales one.
pub fn init_params<T: Scalar>(role: ParamRole, specs: &[ParamSpec], rng: &mut impl Rng, scheme: InitScheme) -> Result<ParamSet<T>> {
    let mut out = ParamSet::new(role);
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.kind {
            ParamKind::Weight { fan_in, fan_out } => {
                let bound = scheme.target_std(fan_in, fan_out) * 3f64.sqrt();
                if bound == 0.0 {
                    vec![T::zero(); n]
                } else {
                    (0..n).map(|_| T::of_f64(rng.random_range(-bound..bound))).collect()
                }
            }
            ParamKind::Bias | ParamKind::BnShift => vec![T::zero(); n],
            ParamKind::BnScale => vec![T::one(); n],
        };
        out.insert(spec.name.clone(), Tensor::from_vec(&spec.shape, data)?)?;
    }
    Ok(out)
}

fn dense_specs(prefix: &str, fan_in: usize, fan_out: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::weight(format!("{prefix}.weight"), &[fan_in, fan_out], fan_in, fan_out),
        ParamSpec::other(format!("{prefix}.bias"), &[fan_out], ParamKind::Bias),
    ]
}

fn dense<T: Scalar>(p: &ParamSet<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = p.req(&format!("{prefix}.weight"))?;
    let b = p.req(&format!("{prefix}.bias"))?;
    Ok(x.matmul(w)?.add_row_vector(b)?)
}

pub fn encoder_specs(cfg: &EncoderConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    Ok(match cfg.variant {
        EncoderVariant::Linear2d => Vec::new(),
        EncoderVariant::Mlp => {
            let mut v = dense_specs("fc1", cfg.flat_input(), cfg.channels).to_vec();
            v.extend(dense_specs("fc2", cfg.channels, cfg.embed_dim));
            v
        }
        EncoderVariant::Conv4 => {
            let mut v = Vec::new();
            let mut c_in = cfg.input_shape[0];
            for i in 1..=4 {
                let c = cfg.channels;
                v.push(ParamSpec::weight(format!("conv{i}.weight"), &[c, c_in, 3, 3], c_in * 9, c * 9));
                if cfg.batch_norm {
                    v.push(ParamSpec::other(format!("bn{i}.gamma"), &[c], ParamKind::BnScale));
                    v.push(ParamSpec::other(format!("bn{i}.beta"), &[c], ParamKind::BnShift));
                } else {
                    v.push(ParamSpec::other(format!("conv{i}.bias"), &[c], ParamKind::Bias));
                }
                c_in = c;
            }
            v
        }
    })
}

pub fn build_encoder<T: Scalar>(cfg: &EncoderConfig, rng: &mut impl Rng, scheme: InitScheme) -> Result<ParamSet<T>> {
    init_params(ParamRole::Encoder, &encoder_specs(cfg)?, rng, scheme)
}

/// Embeds a batch of shape `(B, input_shape...)` into `(B, output_dim)`.
pub fn encode<T: Scalar>(cfg: &EncoderConfig, params: &ParamSet<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = batch.shape();
    if shape.len() != cfg.input_shape.len() + 1 || shape[1..] != cfg.input_shape[..] {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "encode",
            lhs: shape.to_vec(),
            rhs: cfg.input_shape.clone(),
        }
        .into());
    }
    let b = shape[0];
    match cfg.variant {
        EncoderVariant::Linear2d => Ok(batch.reshape(&[b, cfg.flat_input()])?),
        EncoderVariant::Mlp => {
            let x = batch.reshape(&[b, cfg.flat_input()])?;
            let h = dense(params, "fc1", &x)?.relu()?;
            Ok(dense(params, "fc2", &h)?.relu()?)
        }
        EncoderVariant::Conv4 => {
            let mut x = batch.clone();
            for i in 1..=4 {
                x = x.conv2d(params.req(&format!("conv{i}.weight"))?, ConvGeom { stride: 1, pad: 1 })?;
                x = if cfg.batch_norm {
                    let gamma = params.req(&format!("bn{i}.gamma"))?;
                    let beta = params.req(&format!("bn{i}.beta"))?;
                    x.batch_norm(gamma, beta, T::of_f64(BN_EPS))?
                } else {
                    let [bb, c, h, w] = x.shape()[..] else { unreachable!() };
                    let bias = params.req(&format!("conv{i}.bias"))?;
                    x.add(&bias.broadcast_mid(bb, h * w, &[bb, c, h, w])?)?
                };
                x = x.relu()?.maxpool2x2()?;
            }
            let [bb, c, h, w] = x.shape()[..] else { unreachable!() };
            if h * w == 1 {
                Ok(x.reshape(&[bb, c])?)
            } else {
                Ok(x.global_avg_pool()?)
            }
        }
    }
}

pub fn head_specs(embed_dim: usize, n_way: usize) -> Vec<ParamSpec> {
    dense_specs("head", embed_dim, n_way).to_vec()
}

/// Linear classifier `e·W + b` with `W: (embed_dim, n_way)`.
pub fn build_head<T: Scalar>(embed_dim: usize, n_way: usize, rng: &mut impl Rng, scheme: InitScheme) -> Result<ParamSet<T>> {
    if embed_dim == 0 || n_way < 2 {
        return Err(Error::config(format!("head needs embed_dim > 0 and n_way ≥ 2, got {embed_dim}, {n_way}")));
    }
    init_params(ParamRole::Head, &head_specs(embed_dim, n_way), rng, scheme)
}

pub fn classify<T: Scalar>(head: &ParamSet<T>, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
    dense(head, "head", embeddings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperNetConfig {
    pub hidden: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub n_way: usize,
    /// Feed the base classifier's support predictions alongside embeddings and labels.
    pub enhancement: bool,
}

impl Default for HyperNetConfig {
    fn default() -> Self {
        Self { hidden: 256, depth: 3, embed_dim: 64, n_way: 5, enhancement: true }
    }
}

impl HyperNetConfig {
    /// Per-class input: mean embedding ⊕ (mean prediction) ⊕ one-hot label.
    pub fn input_width(&self) -> usize {
        self.embed_dim + self.n_way + if self.enhancement { self.n_way } else { 0 }
    }

    /// Per-class output: that class's head column plus its bias.
    pub fn output_width(&self) -> usize {
        self.embed_dim + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth != 3 {
            return Err(Error::config(format!("hypernetwork depth must be 3, got {}", self.depth)));
        }
        if self.hidden == 0 || self.embed_dim == 0 || self.n_way < 2 {
            return Err(Error::config("hypernetwork widths must be positive and n_way ≥ 2"));
        }
        Ok(())
    }
}

/// Three dense layers with ReLU between them. The last layer starts at
/// exactly zero so a fresh hypernetwork proposes no update.
pub fn build_hypernetwork<T: Scalar>(cfg: &HyperNetConfig, rng: &mut impl Rng, scheme: InitScheme) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut specs = dense_specs("hyper.l1", cfg.input_width(), cfg.hidden).to_vec();
    specs.extend(dense_specs("hyper.l2", cfg.hidden, cfg.hidden));
    let mut params: ParamSet<T> = init_params(ParamRole::Hypernet, &specs, rng, scheme)?;
    let last = dense_specs("hyper.l3", cfg.hidden, cfg.output_width());
    for (name, t) in init_params::<T>(ParamRole::Hypernet, &last, rng, InitScheme::Zeros)?.iter() {
        params.insert(name, t.clone())?;
    }
    Ok(params)
}

/// Maps `(rows, input_width)` to `(rows, output_width)`.
pub fn hypernet_forward<T: Scalar>(params: &ParamSet<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let h = dense(params, "hyper.l1", input)?.relu()?;
    let h = dense(params, "hyper.l2", &h)?.relu()?;
    dense(params, "hyper.l3", &h)
}
