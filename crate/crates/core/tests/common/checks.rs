//! Oracle checks shared by the integration tests and the acceptance suite.
//! Each returns a measured quantity; callers compare it with a tolerance.

use std::cell::Cell;
use std::sync::Arc;

use metaforge::meta::{
    enhance_support, hyper_update, hypermaml_adapt, maml_adapt, maml_episode_grads, HyperMamlConfig, MamlConfig, Model,
};
use metaforge::nn::{self, EncoderConfig, HyperNetConfig, InitScheme};
use metaforge::tasks::{gaussian2d_episode, Episode, Gaussian2dConfig};
use metaforge::tensor::{
    apply_primitive, backward, finite_diff_grad, grad, ConvGeom, ParamRole, ParamSet, PrimitiveAttrs, PrimitiveKind,
    Tape,
};
use metaforge::{Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{flat_in_order, normal_vec, randn, rel_err};

pub const FD_EPS: f64 = 1e-4;
const NORM_FLOOR: f64 = 1e-8;

type TResult<T> = Result<T, TensorError>;

fn set(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    let mut p = ParamSet::new(ParamRole::Encoder);
    for (n, t) in entries {
        p.insert(n, t).unwrap();
    }
    p
}

/// Values bounded away from zero, so a ±ε probe never crosses the relu kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 } * rng.random_range(0.05..2.0))
        .collect();
    Tensor::from_vec(shape, v).unwrap()
}

/// Pairwise-distinct values at least `4/n` apart, so no ±ε probe changes
/// which entry of a pooling window is largest.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let step = 4.0 / n as f64;
    let v = ranks.iter().map(|&r| -2.0 + step * (r as f64 + rng.random_range(0.25..0.75))).collect();
    Tensor::from_vec(shape, v).unwrap()
}

/// A random point and attributes for one primitive.
pub fn primitive_case(kind: PrimitiveKind, rng: &mut ChaCha8Rng) -> (ParamSet<f64>, PrimitiveAttrs) {
    let mut attrs = PrimitiveAttrs::default();
    let (b, m, n) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5));
    let inputs = match kind {
        PrimitiveKind::Matmul => vec![("x0", randn(rng, &[b, m], 1.0)), ("x1", randn(rng, &[m, n], 1.0))],
        PrimitiveKind::Add => vec![("x0", randn(rng, &[b, m, n], 1.0)), ("x1", randn(rng, &[b, m, n], 1.0))],
        PrimitiveKind::Scale => {
            attrs.factor = rng.random_range(-3.0..3.0);
            vec![("x0", randn(rng, &[b, m], 1.0))]
        }
        PrimitiveKind::Relu => vec![("x0", off_zero(rng, &[b, m, n]))],
        PrimitiveKind::Conv2d => {
            let k = rng.random_range(1..=3);
            attrs.conv = ConvGeom { stride: rng.random_range(1..=2), pad: rng.random_range(0..=1) };
            let (c, o) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let (h, w) = (rng.random_range(k..=6), rng.random_range(k..=6));
            vec![("x0", randn(rng, &[b.min(2), c, h, w], 1.0)), ("x1", randn(rng, &[o, c, k, k], 0.5))]
        }
        PrimitiveKind::Maxpool2x2 => {
            let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
            let c = rng.random_range(1..=2);
            vec![("x0", well_separated(rng, &[b.min(2), c, h, w]))]
        }
        PrimitiveKind::GlobalAvgPool => {
            let h = rng.random_range(1..=4);
            vec![("x0", randn(rng, &[b, m, h, n], 1.0))]
        }
        PrimitiveKind::BatchNorm => {
            let bb = rng.random_range(3..=5);
            let c = rng.random_range(1..=3);
            let shape = if rng.random::<bool>() { vec![bb, c] } else { vec![bb, c, rng.random_range(1..=3), rng.random_range(1..=3)] };
            let gamma = Tensor::from_vec(&[c], normal_vec(rng, c, 0.3).into_iter().map(|v| 1.0 + v).collect()).unwrap();
            vec![("x0", randn(rng, &shape, 1.0)), ("x1", gamma), ("x2", randn(rng, &[c], 0.5))]
        }
        PrimitiveKind::ConcatLastAxis => vec![("x0", randn(rng, &[b, m], 1.0)), ("x1", randn(rng, &[b, n], 1.0))],
        PrimitiveKind::MeanRows => vec![("x0", randn(rng, &[b, m], 1.0))],
        PrimitiveKind::SoftmaxXent => {
            let n = n.max(2);
            attrs.labels = (0..b).map(|_| rng.random_range(0..n)).collect();
            vec![("x0", randn(rng, &[b, n], 2.0))]
        }
        PrimitiveKind::Reshape => {
            attrs.shape = vec![b * m, n];
            vec![("x0", randn(rng, &[b, m, n], 1.0))]
        }
    };
    (set(inputs), attrs)
}

/// `⟨primitive(inputs), r⟩`: a scalar whose gradient exercises every output entry.
fn projected(kind: PrimitiveKind, p: &ParamSet<f64>, attrs: &PrimitiveAttrs, r: &Tensor<f64>) -> TResult<Tensor<f64>> {
    let inputs: Vec<&Tensor<f64>> = p.iter().map(|(_, t)| t).collect();
    let out = apply_primitive(kind, &inputs, attrs)?;
    out.reshape(&[1, out.numel()])?.matmul(r)
}

/// Worst relative error of backward against central differences over
/// `points` random points of `kind`.
pub fn primitive_gradcheck(kind: PrimitiveKind, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let (p, attrs) = primitive_case(kind, &mut rng);
        let inputs: Vec<&Tensor<f64>> = p.iter().map(|(_, t)| t).collect();
        let numel = apply_primitive(kind, &inputs, &attrs).unwrap().numel();
        let r = randn(&mut rng, &[numel, 1], 1.0);

        let tape = Tape::new();
        let pa = p.attach(&tape);
        let loss = projected(kind, &pa, &attrs, &r).unwrap();
        let ad = backward(&loss, &pa, false).unwrap();
        let fd = finite_diff_grad(|q: &ParamSet<f64>| projected(kind, q, &attrs, &r).map(|t| t.item()), &p, FD_EPS).unwrap();
        worst = worst.max(rel_err(&flat_in_order(&p, &ad), &flat_in_order(&p, &fd), NORM_FLOOR));
    }
    worst
}

/// Relu masks and maxpool selections of one forward pass. Together they
/// pick the smooth piece of a piecewise-smooth network.
#[derive(Clone, Debug, Default, PartialEq)]
struct Branch {
    masks: Vec<Arc<Vec<f64>>>,
    pools: Vec<Arc<Vec<usize>>>,
}

struct Recorder<'a> {
    frozen: Option<&'a Branch>,
    seen: Branch,
}

impl Recorder<'_> {
    fn relu(&mut self, x: &Tensor<f64>) -> TResult<Tensor<f64>> {
        let k = self.seen.masks.len();
        let mask = match self.frozen {
            Some(b) => b.masks[k].clone(),
            None => Arc::new(x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()),
        };
        self.seen.masks.push(mask.clone());
        x.mask_mul(mask)
    }

    fn maxpool(&mut self, x: &Tensor<f64>) -> TResult<Tensor<f64>> {
        let [b, c, h, w] = x.shape()[..] else { panic!("maxpool expects rank 4") };
        let k = self.seen.pools.len();
        let idx = match self.frozen {
            Some(br) => br.pools[k].clone(),
            None => {
                let d = x.data();
                let mut idx = Vec::with_capacity(b * c * (h / 2) * (w / 2));
                for bc in 0..b * c {
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let cand = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| bc * h * w + (2 * oy + dy) * w + 2 * ox + dx);
                            let best = cand.into_iter().fold(cand[0], |a, i| if d[i] > d[a] { i } else { a });
                            idx.push(best);
                        }
                    }
                }
                Arc::new(idx)
            }
        };
        self.seen.pools.push(idx.clone());
        x.gather(idx, &[b, c, h / 2, w / 2])
    }
}

/// Splits a combined point into input batch, encoder and head.
fn split_point(p: &ParamSet<f64>) -> (Tensor<f64>, ParamSet<f64>, ParamSet<f64>) {
    let mut enc = ParamSet::new(ParamRole::Encoder);
    let mut head = ParamSet::new(ParamRole::Head);
    for (n, t) in p.iter() {
        if n.starts_with("head.") {
            head.insert(n, t.clone()).unwrap();
        } else if n != "input" {
            enc.insert(n, t.clone()).unwrap();
        }
    }
    (p.req("input").unwrap().clone(), enc, head)
}

/// The library's encoder graph written out with explicit relu masks and
/// pooling selections, so it can be evaluated on a fixed branch.
fn replica_loss(cfg: &EncoderConfig, p: &ParamSet<f64>, labels: &[usize], frozen: Option<&Branch>) -> TResult<(f64, Branch)> {
    let (x, enc, head) = split_point(p);
    let mut rec = Recorder { frozen, seen: Branch::default() };
    let b = x.shape()[0];
    let e = match cfg.variant {
        nn::EncoderVariant::Conv4 => {
            let mut h = x;
            for i in 1..=4 {
                h = h.conv2d(enc.req(&format!("conv{i}.weight"))?, ConvGeom { stride: 1, pad: 1 })?;
                h = h.batch_norm(enc.req(&format!("bn{i}.gamma"))?, enc.req(&format!("bn{i}.beta"))?, 1e-5)?;
                h = rec.relu(&h)?;
                h = rec.maxpool(&h)?;
            }
            let c = h.shape()[1];
            h.reshape(&[b, c])?
        }
        nn::EncoderVariant::Mlp => {
            let mut h = x.reshape(&[b, cfg.input_shape.iter().product()])?;
            for layer in ["fc1", "fc2"] {
                h = h.matmul(enc.req(&format!("{layer}.weight"))?)?.add_row_vector(enc.req(&format!("{layer}.bias"))?)?;
                h = rec.relu(&h)?;
            }
            h
        }
        nn::EncoderVariant::Linear2d => x,
    };
    let logits = e.matmul(head.req("head.weight")?)?.add_row_vector(head.req("head.bias")?)?;
    Ok((logits.softmax_xent(labels)?.item(), rec.seen))
}

/// Library loss: encode, classify, cross-entropy.
fn library_loss(cfg: &EncoderConfig, p: &ParamSet<f64>, labels: &[usize]) -> Tensor<f64> {
    let (x, enc, head) = split_point(p);
    let e = nn::encode(cfg, &enc, &x).unwrap();
    nn::classify(&head, &e).unwrap().softmax_xent(labels).unwrap()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GraphCheck {
    pub worst_rel_err: f64,
    /// Finite-difference probes that crossed a relu or pooling switch and
    /// were evaluated on the base point's branch instead.
    pub branch_probes: usize,
    pub total_probes: usize,
}

/// Full-graph check: gradient of the cross-entropy of a whole encoder plus
/// head with respect to every parameter and the input batch.
///
/// Central differences are only an oracle where the function is smooth on
/// `[p − ε, p + ε]`. A probe that changes any relu mask or pooling
/// selection is evaluated on the branch active at `p` instead, which is the
/// smooth piece whose derivative backward computes.
pub fn graph_gradcheck(cfg: &EncoderConfig, batch: usize, n_way: usize, points: usize, seed: u64) -> GraphCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GraphCheck::default();
    for _ in 0..points {
        let enc: ParamSet<f64> = nn::build_encoder(cfg, &mut rng, InitScheme::KaimingUniform).unwrap();
        let mut p = ParamSet::new(ParamRole::Encoder);
        let mut in_shape = vec![batch];
        in_shape.extend(&cfg.input_shape);
        p.insert("input", randn(&mut rng, &in_shape, 1.0)).unwrap();
        for (n, t) in enc.iter() {
            let t = if n.contains(".gamma") || n.contains(".beta") {
                let base = if n.contains(".gamma") { 1.0 } else { 0.0 };
                Tensor::from_vec(t.shape(), normal_vec(&mut rng, t.numel(), 0.3).into_iter().map(|v| base + v).collect()).unwrap()
            } else if n.ends_with(".bias") {
                randn(&mut rng, t.shape(), 0.3)
            } else {
                t.clone()
            };
            p.insert(n, t).unwrap();
        }
        let d = cfg.output_dim();
        p.insert("head.weight", randn(&mut rng, &[d, n_way], 0.7)).unwrap();
        p.insert("head.bias", randn(&mut rng, &[n_way], 0.3)).unwrap();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n_way)).collect();

        let (base_val, base_branch) = replica_loss(cfg, &p, &labels, None).unwrap();
        let lib = library_loss(cfg, &p, &labels);
        assert_eq!(base_val.to_bits(), lib.item().to_bits(), "replica must reproduce the library graph");

        let tape = Tape::new();
        let pa = p.attach(&tape);
        let ad = backward(&library_loss(cfg, &pa, &labels), &pa, false).unwrap();

        let switched = Cell::new(0usize);
        let probes = Cell::new(0usize);
        let fd = finite_diff_grad(
            |q: &ParamSet<f64>| -> TResult<f64> {
                probes.set(probes.get() + 1);
                let (v, br) = replica_loss(cfg, q, &labels, None)?;
                if br == base_branch {
                    Ok(v)
                } else {
                    switched.set(switched.get() + 1);
                    Ok(replica_loss(cfg, q, &labels, Some(&base_branch))?.0)
                }
            },
            &p,
            FD_EPS,
        )
        .unwrap();
        out.worst_rel_err = out.worst_rel_err.max(rel_err(&flat_in_order(&p, &ad), &flat_in_order(&p, &fd), NORM_FLOOR));
        out.branch_probes += switched.get();
        out.total_probes += probes.get();
    }
    out
}

/// Logistic loss of `σ(w·x + b)` written as a two-logit softmax `[0, w·x + b]`.
fn logistic_loss(w: &Tensor<f64>, b: &Tensor<f64>, x: &Tensor<f64>, y: &[usize]) -> TResult<Tensor<f64>> {
    let z = x.matmul(&w.reshape(&[1, 1])?)?.add_row_vector(b)?;
    Tensor::zeros(&[y.len(), 1]).concat_cols(&z)?.softmax_xent(y)
}

/// Plain-arithmetic logistic loss and gradient, independent of the engine.
fn logistic_plain(w: f64, b: f64, x: &[f64], y: &[usize]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mut l, mut gw, mut gb) = (0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let z = w * xi + b;
        let s = 1.0 / (1.0 + (-z).exp());
        l += if yi == 1 { (1.0 + (-z).exp()).ln() } else { (1.0 + z.exp()).ln() };
        gw += (s - yi as f64) * xi;
        gb += s - yi as f64;
    }
    (l / n, gw / n, gb / n)
}

/// Worst relative error of the two-parameter logistic meta-gradient (one
/// inner step, second order) against central differences of the
/// meta-objective, whose inner gradient is computed by hand.
pub fn logistic_meta_gradcheck(points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let alpha = rng.random_range(0.1..1.5);
        let xs = normal_vec(&mut rng, 6, 1.5);
        let ys: Vec<usize> = (0..6).map(|i| i % 2).collect();
        let xq = normal_vec(&mut rng, 8, 1.5);
        let yq: Vec<usize> = (0..8).map(|i| (i + 1) % 2).collect();
        let theta = normal_vec(&mut rng, 2, 1.0);

        let tape = Tape::new();
        let w = tape.leaf(&Tensor::from_f64s(&[1], &theta[..1]).unwrap());
        let b = tape.leaf(&Tensor::from_f64s(&[1], &theta[1..]).unwrap());
        let sx = Tensor::from_f64s(&[6, 1], &xs).unwrap();
        let qx = Tensor::from_f64s(&[8, 1], &xq).unwrap();
        let ls = logistic_loss(&w, &b, &sx, &ys).unwrap();
        let g = grad(&ls, &[&w, &b], true).unwrap();
        let w1 = w.sub(&g[0].scale(alpha).unwrap()).unwrap();
        let b1 = b.sub(&g[1].scale(alpha).unwrap()).unwrap();
        let lq = logistic_loss(&w1, &b1, &qx, &yq).unwrap();
        let meta = grad(&lq, &[&w, &b], false).unwrap();
        let ad = [meta[0].item(), meta[1].item()];

        let point = set(vec![("w", Tensor::from_f64s(&[1], &theta[..1]).unwrap()), ("b", Tensor::from_f64s(&[1], &theta[1..]).unwrap())]);
        let fd = finite_diff_grad(
            |p: &ParamSet<f64>| -> TResult<f64> {
                let (w, b) = (p.req("w")?.item(), p.req("b")?.item());
                let (_, gw, gb) = logistic_plain(w, b, &xs, &ys);
                Ok(logistic_plain(w - alpha * gw, b - alpha * gb, &xq, &yq).0)
            },
            &point,
            FD_EPS,
        )
        .unwrap();
        worst = worst.max(rel_err(&ad, &flat_in_order(&point, &fd), NORM_FLOOR));
    }
    worst
}

/// A small 2-D episode for the library-level checks.
pub fn toy_episode(seed: u64, task: usize, k: usize, q: usize) -> Episode<f64> {
    gaussian2d_episode(&Gaussian2dConfig::default(), task, k, q, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Worst relative error of the library's second-order MAML meta-gradient
/// (one inner step over encoder and head) against central differences of
/// the meta-objective.
pub fn maml_meta_gradcheck(points: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let enc_cfg = EncoderConfig::linear2d();
    for i in 0..points as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i);
        let model: Model<f64> = Model::new(enc_cfg.clone(), 2, None, &mut rng, InitScheme::XavierUniform).unwrap();
        let ep = toy_episode(seed.wrapping_add(i), (i % 4) as usize, 3, 4);
        let cfg = MamlConfig { inner_lr: rng.random_range(0.1..1.0), inner_steps: 1, ..Default::default() };
        let (_, g) = maml_episode_grads(&model, &ep, &cfg).unwrap();
        let fd = finite_diff_grad(
            |h: &ParamSet<f64>| -> Result<f64, metaforge::Error> {
                let (e, h) = maml_adapt(&enc_cfg, &model.encoder, h, &ep.support_x, &ep.support_y, &cfg)?;
                let z = nn::classify(&h, &nn::encode(&enc_cfg, &e, &ep.query_x)?)?;
                Ok(z.softmax_xent(&ep.query_y)?.item())
            },
            &model.head,
            FD_EPS,
        )
        .unwrap();
        worst = worst.max(rel_err(&flat_in_order(&model.head, &g.head), &flat_in_order(&model.head, &fd), NORM_FLOOR));
    }
    worst
}

/// Largest gap between the engine's meta-gradient of
/// `L_Q(θ) = b(θ − d)²` after one step on `L_S(θ) = a(θ − c)²` and the
/// closed form `2b(θ' − d)(1 − 2aα)`.
pub fn quadratic_closed_form_gap(points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let [a, b, c, d, th]: [f64; 5] = [(); 5].map(|_| rng.random_range(-2.0..2.0));
        let alpha = rng.random_range(0.0..1.0);
        let tape = Tape::new();
        let theta = tape.leaf(&Tensor::scalar(th));
        let ls = theta.add_scalar(-c).unwrap().pow(2.0).unwrap().scale(a).unwrap();
        let g = grad(&ls, &[&theta], true).unwrap();
        let adapted = theta.sub(&g[0].scale(alpha).unwrap()).unwrap();
        let lq = adapted.add_scalar(-d).unwrap().pow(2.0).unwrap().scale(b).unwrap();
        let meta = grad(&lq, &[&theta], false).unwrap()[0].item();
        let th1 = th - alpha * 2.0 * a * (th - c);
        let closed = 2.0 * b * (th1 - d) * (1.0 - 2.0 * a * alpha);
        worst = worst.max((meta - closed).abs());
    }
    worst
}

/// Worst relative error of a Hessian-vector product obtained by
/// differentiating a create-graph gradient, against central differences
/// of `⟨∇L, v⟩` built from first-order gradients.
pub fn hvp_gradcheck(points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let enc_cfg = EncoderConfig::linear2d();
    let enc = ParamSet::new(ParamRole::Encoder);
    for i in 0..points as u64 {
        let ep = toy_episode(seed.wrapping_add(i), (i % 4) as usize, 4, 1);
        let head = set(vec![("head.weight", randn(&mut rng, &[2, 2], 0.7)), ("head.bias", randn(&mut rng, &[2], 0.3))]);
        let v: Vec<f64> = normal_vec(&mut rng, head.numel(), 1.0);
        let dot = |h: &ParamSet<f64>, create_graph: bool| -> TResult<Tensor<f64>> {
            let z = nn::classify(h, &nn::encode(&enc_cfg, &enc, &ep.support_x).unwrap()).unwrap();
            let g = backward(&z.softmax_xent(&ep.support_y)?, h, create_graph)?;
            let mut acc = Tensor::scalar(0.0);
            let mut off = 0;
            for (name, _) in h.iter() {
                let gi = g.req(name)?;
                let vi = Tensor::from_f64s(&[1, gi.numel()], &v[off..off + gi.numel()])?;
                acc = acc.add(&vi.matmul(&gi.reshape(&[gi.numel(), 1])?)?.reshape(&[])?)?;
                off += gi.numel();
            }
            Ok(acc)
        };
        let tape = Tape::new();
        let ha = head.attach(&tape);
        let hv = backward(&dot(&ha, true).unwrap(), &ha, false).unwrap();
        let fd = finite_diff_grad(
            |h: &ParamSet<f64>| -> TResult<f64> {
                let tape = Tape::new();
                Ok(dot(&h.attach(&tape), false)?.item())
            },
            &head,
            FD_EPS,
        )
        .unwrap();
        worst = worst.max(rel_err(&flat_in_order(&head, &hv), &flat_in_order(&head, &fd), NORM_FLOOR));
    }
    worst
}

fn max_gap(a: &ParamSet<f64>, b: &metaforge::tensor::GradMap<f64>) -> f64 {
    a.names().map(|n| a.req(n).unwrap().max_abs_diff(b.req(n).unwrap())).fold(0.0, f64::max)
}

/// With α = 0 the meta-gradient must equal the plain query-loss gradient.
/// Returns the largest absolute difference over encoder and head, across
/// step counts and both gradient orders.
pub fn zero_step_size_gap(seed: u64) -> f64 {
    let enc_cfg = EncoderConfig::mlp(2, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model: Model<f64> = Model::new(enc_cfg.clone(), 2, None, &mut rng, InitScheme::KaimingUniform).unwrap();
    let ep = toy_episode(seed, 1, 5, 5);

    let tape = Tape::new();
    let m = model.attach(&tape);
    let z = nn::classify(&m.head, &nn::encode(&enc_cfg, &m.encoder, &ep.query_x).unwrap()).unwrap();
    let loss = z.softmax_xent(&ep.query_y).unwrap();
    let plain_enc = backward(&loss, &m.encoder, false).unwrap();
    let plain_head = backward(&loss, &m.head, false).unwrap();
    let plain_enc = ParamSet::new(ParamRole::Encoder).with_all(&plain_enc);
    let plain_head = ParamSet::new(ParamRole::Head).with_all(&plain_head);

    let mut worst: f64 = 0.0;
    for steps in [1, 3] {
        for first_order in [false, true] {
            let cfg = MamlConfig { inner_lr: 0.0, inner_steps: steps, first_order, ..Default::default() };
            let (_, g) = maml_episode_grads(&model, &ep, &cfg).unwrap();
            worst = worst.max(max_gap(&plain_enc, &g.encoder)).max(max_gap(&plain_head, &g.head));
        }
    }
    worst
}

trait WithAll {
    fn with_all(self, g: &metaforge::tensor::GradMap<f64>) -> Self;
}

impl WithAll for ParamSet<f64> {
    fn with_all(mut self, g: &metaforge::tensor::GradMap<f64>) -> Self {
        for (n, t) in g.iter() {
            self.insert(n, t.clone()).unwrap();
        }
        self
    }
}

/// A HyperMAML model on the toy problem. With `random_last_layer` the
/// hypernetwork's output layer is overwritten with non-zero values.
pub fn toy_hyper_model(seed: u64, random_last_layer: bool) -> (Model<f64>, HyperMamlConfig) {
    let enc_cfg = EncoderConfig::mlp(2, 8, 4);
    let hcfg = HyperNetConfig { hidden: 16, embed_dim: 4, n_way: 2, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: Model<f64> = Model::new(enc_cfg, 2, Some(hcfg.clone()), &mut rng, InitScheme::KaimingUniform).unwrap();
    if random_last_layer {
        let h = model.hyper.as_mut().unwrap();
        let mut params = ParamSet::new(ParamRole::Hypernet);
        for (n, t) in h.params.iter() {
            let t = if n.starts_with("hyper.l3") { randn(&mut rng, t.shape(), 0.2) } else { t.clone() };
            params.insert(n, t).unwrap();
        }
        h.params = params;
    }
    let cfg = HyperMamlConfig { hypernet: hcfg, warmup_lr: 0.3, ..Default::default() };
    (model, cfg)
}

/// The hypernetwork head update computed step by step from public pieces.
pub fn direct_hyper_head(model: &Model<f64>, ep: &Episode<f64>) -> ParamSet<f64> {
    let e = nn::encode(&model.encoder_cfg, &model.encoder, &ep.support_x).unwrap();
    let preds = nn::classify(&model.head, &e).unwrap().softmax_rows().unwrap();
    let enhanced = enhance_support(&e, &ep.support_y, Some(&preds), model.n_way()).unwrap();
    hyper_update(&model.head, &enhanced, &model.hyper.as_ref().unwrap().params).unwrap().0
}

#[derive(Clone, Copy, Debug)]
pub struct Degeneracy {
    pub zero_step_gap: f64,
    /// A zero-initialized hypernetwork returns the head unchanged.
    pub zero_hyper_identity: bool,
    /// λ = 1 equals the hypernetwork update.
    pub lambda_one_is_hyper: bool,
    /// λ = 0 equals one head-only gradient step at the warm-up rate.
    pub lambda_zero_is_gradient_step: bool,
}

pub fn degeneracy_identities(seed: u64) -> Degeneracy {
    let ep = toy_episode(seed, 2, 5, 5);
    let (fresh, cfg) = toy_hyper_model(seed, false);
    let zero_hyper_identity = direct_hyper_head(&fresh, &ep).bit_eq(&fresh.head)
        && hypermaml_adapt(&fresh, &ep.support_x, &ep.support_y, &cfg, 1.0).unwrap().head.bit_eq(&fresh.head);

    let (model, cfg) = toy_hyper_model(seed, true);
    let one = hypermaml_adapt(&model, &ep.support_x, &ep.support_y, &cfg, 1.0).unwrap();
    let hyper_head = direct_hyper_head(&model, &ep);
    let lambda_one_is_hyper = one.head.bit_eq(&hyper_head) && !hyper_head.bit_eq(&model.head);

    let zero = hypermaml_adapt(&model, &ep.support_x, &ep.support_y, &cfg, 0.0).unwrap();
    let step = MamlConfig { inner_lr: cfg.warmup_lr, inner_steps: 1, head_only: true, ..Default::default() };
    let (_, maml_head) = maml_adapt(&model.encoder_cfg, &model.encoder, &model.head, &ep.support_x, &ep.support_y, &step).unwrap();
    let lambda_zero_is_gradient_step = zero.head.bit_eq(&maml_head) && !maml_head.bit_eq(&model.head);

    Degeneracy { zero_step_gap: zero_step_size_gap(seed), zero_hyper_identity, lambda_one_is_hyper, lambda_zero_is_gradient_step }
}

/// Mean cross-entropy of all-equal logits over `n` classes.
pub fn uniform_xent(n: usize, rows: usize, logit: f64) -> f64 {
    let labels: Vec<usize> = (0..rows).map(|i| i % n).collect();
    Tensor::<f64>::full(&[rows, n], logit).softmax_xent(&labels).unwrap().item()
}

/// Verifies one episode from first principles: row counts, label range,
/// per-class counts, class-major layout and input shape.
pub fn check_episode<T: metaforge::Scalar>(ep: &Episode<T>, n: usize, k: usize, q: usize, input_shape: &[usize]) -> Result<(), String> {
    let rows = |x: &Tensor<T>| x.shape().first().copied().unwrap_or(0);
    if rows(&ep.support_x) != n * k || rows(&ep.query_x) != n * q {
        return Err(format!("rows {}/{} for {n}-way {k}-shot q={q}", rows(&ep.support_x), rows(&ep.query_x)));
    }
    if ep.support_x.shape()[1..] != *input_shape || ep.query_x.shape()[1..] != *input_shape {
        return Err(format!("input shape {:?}, expected {input_shape:?}", &ep.support_x.shape()[1..]));
    }
    for (labels, per) in [(&ep.support_y, k), (&ep.query_y, q)] {
        if labels.len() != n * per {
            return Err(format!("{} labels, expected {}", labels.len(), n * per));
        }
        let mut counts = vec![0usize; n];
        for (i, &l) in labels.iter().enumerate() {
            if l >= n {
                return Err(format!("label {l} outside 0..{n}"));
            }
            if l != i / per {
                return Err(format!("row {i} has label {l}, layout is class-major"));
            }
            counts[l] += 1;
        }
        if counts.iter().any(|&c| c != per) {
            return Err(format!("class counts {counts:?}, expected {per} each"));
        }
    }
    if !ep.support_x.all_finite() || !ep.query_x.all_finite() {
        return Err("non-finite input".into());
    }
    Ok(())
}

/// Samples `count` episodes with random shapes from a glyph family, a
/// cross-domain glyph pair and the 2-D toy, checking each one. Also
/// checks that the cross-domain pools are disjoint.
pub fn episode_invariants(count: usize, seed: u64) -> Result<usize, String> {
    use metaforge::tasks::{GlyphConfig, GlyphFamily, Split, TaskFamily};
    let glyphs = |s: u64, name: &str| Arc::new(GlyphFamily::new(name, GlyphConfig { n_classes: 40, seed: s, ..Default::default() }).unwrap());
    let single = TaskFamily::new(glyphs(1, "glyphs"), [0.6, 0.2, 0.2], seed).map_err(|e| e.to_string())?;
    let cross = TaskFamily::cross_domain(glyphs(1, "glyphs"), glyphs(1, "glyphs-b"), 0.2, seed).map_err(|e| e.to_string())?;
    for fam in [&single, &cross] {
        let s = fam.splits();
        if !s.is_disjoint() {
            return Err("class pools overlap".into());
        }
        for a in Split::ALL {
            for b in Split::ALL {
                if a != b && s.get(a).iter().any(|x| s.get(b).contains(x)) {
                    return Err(format!("{a} and {b} pools share a class"));
                }
            }
        }
    }
    if cross.splits().train.iter().any(|c| c.family != "glyphs") || cross.splits().test.iter().any(|c| c.family != "glyphs-b") {
        return Err("cross-domain pools mix families".into());
    }

    let check_range = |count: usize, offset: u64| -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ offset);
        for i in 0..count as u64 {
            let (k, q) = (rng.random_range(1..=5), rng.random_range(1..=8));
            let split = Split::ALL[rng.random_range(0..3)];
            match rng.random_range(0..3) {
                0 => {
                    let n = rng.random_range(2..=single.splits().get(split).len().min(8));
                    let ep = single.episode(split, n, k, q, offset + i).map_err(|e| e.to_string())?;
                    check_episode(&ep, n, k, q, &[1, 28, 28])?;
                }
                1 => {
                    let n = rng.random_range(2..=cross.splits().get(split).len().min(8));
                    let ep = cross.episode(split, n, k, q, offset + i).map_err(|e| e.to_string())?;
                    check_episode(&ep, n, k, q, &[1, 28, 28])?;
                }
                _ => {
                    let ep: Episode<f32> = gaussian2d_episode(&Gaussian2dConfig::default(), rng.random_range(0..4), k, q, &mut rng)
                        .map_err(|e| e.to_string())?;
                    check_episode(&ep, 2, k, q, &[2])?;
                }
            }
        }
        Ok(())
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let per = count.div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let n = per.min(count.saturating_sub(w * per));
                s.spawn(move || check_range(n, (w as u64) << 32))
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("episode worker panicked"))
    })?;
    Ok(count)
}
