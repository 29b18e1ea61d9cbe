//! The meta-training loop, model/checkpoint conversion and the epoch log.

use std::fs;
use std::path::Path;

use metaforge::bench::{self, Report};
use metaforge::meta::{AdamState, Algorithm, Model, ModelOptimizer};
use metaforge::nn::ParamSet;
use metaforge::tasks::{derive_seed, Split};
use metaforge::{Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedTensor, OptimizerBlob};
use crate::config::RunConfig;
use crate::data::EpisodeSource;
use crate::error::{CliError, Result};

/// Stream of the parameter initializer, apart from the episode streams.
const INIT_STREAM: u64 = 0x696e_6974;
const BEST_VAL: &str = "train/best_val_accuracy";

/// One row of `train_log.csv`. `lambda` and `lr` are the values used while
/// training epoch `epoch` (0-based); validation runs after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    /// Mean query loss per training episode.
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_ci95: Option<f64>,
}

/// Model, optimizer and progress of one run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub source: EpisodeSource,
    pub model: Model<f32>,
    pub opt: ModelOptimizer<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Best validation accuracy so far, at checkpoint precision.
    pub best_val: Option<f32>,
}

pub fn init_model(cfg: &RunConfig) -> Result<Model<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_STREAM));
    let hyper = match &cfg.algorithm {
        Algorithm::HyperMaml(h) => Some(h.hypernet.clone()),
        Algorithm::Maml(_) => None,
    };
    Ok(Model::new(cfg.encoder.clone(), cfg.n_way, hyper, &mut rng, cfg.init)?)
}

fn diverged(epoch: usize, err: metaforge::Error) -> CliError {
    match err {
        metaforge::Error::NonFiniteLoss(_) | metaforge::Error::Tensor(TensorError::NonFinite { .. }) => {
            CliError::Diverged { epoch, source: err }
        }
        other => other.into(),
    }
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let source = EpisodeSource::build(&cfg)?;
        let model = init_model(&cfg)?;
        let opt = ModelOptimizer::new(&model, cfg.adam);
        Ok(Self { cfg, source, model, opt, epoch: 0, best_val: None })
    }

    /// Continues from `ckpt`, which must match `cfg` unless `force` is set.
    pub fn resume(cfg: RunConfig, ckpt: &Checkpoint, path: &Path, force: bool) -> Result<Self> {
        ckpt.check_config(cfg.config_hash(), force, path)?;
        let mut t = Self::new(cfg)?;
        t.model = model_from_checkpoint(&t.model, ckpt, path)?;
        t.opt = optimizer_from_checkpoint(&t.opt, ckpt, path)?;
        t.epoch = usize::try_from(ckpt.epoch).map_err(|_| bad(path, "epoch does not fit in memory"))?;
        t.best_val = ckpt.tensor(BEST_VAL).and_then(|b| b.data.first().copied()).filter(|v| !v.is_nan());
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.cfg.config_hash(), self.epoch as u64);
        c.tensors = model_tensors(&self.model);
        c.tensors.push(NamedTensor { name: BEST_VAL.into(), shape: vec![1], data: vec![self.best_val.unwrap_or(f32::NAN)] });
        let mut blob = |name: &str, s: &AdamState<f32>| {
            let mut tensors = Vec::new();
            push_set(&mut tensors, "m", &s.m);
            push_set(&mut tensors, "v", &s.v);
            c.optimizer.push(OptimizerBlob { name: name.into(), step: s.step, tensors });
        };
        blob("encoder", &self.opt.encoder);
        blob("head", &self.opt.head);
        if let Some(h) = &self.opt.hyper {
            blob("hyper", h);
        }
        c
    }

    /// Runs one epoch of meta-steps and advances the epoch counter.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let cfg = &self.cfg;
        let e = self.epoch;
        let (lambda, lr) = (cfg.lambda(e), cfg.lr(e));
        let mut total = 0.0;
        for step in 0..cfg.episodes_per_epoch / cfg.meta_batch {
            let first = (e * cfg.episodes_per_epoch + step * cfg.meta_batch) as u64;
            let episodes = (first..first + cfg.meta_batch as u64)
                .map(|i| self.source.episode(Split::Train, cfg.n_way, cfg.k_shot, cfg.q_per_class, i))
                .collect::<metaforge::Result<Vec<_>>>()?;
            let (loss, grads) =
                cfg.algorithm.meta_gradient(&self.model, &episodes, lambda, cfg.threads).map_err(|err| diverged(e, err))?;
            if !loss.is_finite() {
                return Err(diverged(e, metaforge::Error::NonFiniteLoss("meta-objective")));
            }
            self.opt.step(&mut self.model, &grads, lr)?;
            total += loss;
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: e,
            lambda,
            lr,
            train_loss: total / cfg.episodes_per_epoch as f64,
            val_accuracy: None,
            val_ci95: None,
        })
    }

    /// Accuracy over `episodes` episodes of `split` at the current λ.
    /// `seed` selects the episode stream; the configured seed reproduces
    /// the validation numbers recorded during training.
    pub fn evaluate(&self, split: Split, episodes: usize, seed: u64) -> Result<Report> {
        let alt;
        let source = if seed == self.cfg.seed {
            &self.source
        } else {
            alt = EpisodeSource::build(&RunConfig { seed, ..self.cfg.clone() })?;
            &alt
        };
        let c = &self.cfg;
        let mut report = bench::evaluate(
            &format!("{}/{split}", c.name),
            &c.algorithm,
            &self.model,
            |i| source.episode(split, c.n_way, c.k_shot, c.q_per_class, i),
            episodes,
            c.lambda(self.epoch),
            seed,
        )?;
        report.config_hash = format!("{:016x}", c.config_hash());
        Ok(report)
    }
}

fn bad(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::Checkpoint { path: path.into(), msg: msg.into() }
}

fn push_set(out: &mut Vec<NamedTensor>, prefix: &str, set: &ParamSet<f32>) {
    for (name, t) in set.iter() {
        out.push(NamedTensor { name: format!("{prefix}/{name}"), shape: t.shape().to_vec(), data: t.to_vec() });
    }
}

fn model_tensors(model: &Model<f32>) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    push_set(&mut out, "encoder", &model.encoder);
    push_set(&mut out, "head", &model.head);
    if let Some(h) = &model.hyper {
        push_set(&mut out, "hyper", &h.params);
    }
    out
}

/// Rebuilds `template` from `tensors`, requiring every name with its exact shape.
fn set_from(template: &ParamSet<f32>, prefix: &str, tensors: &[NamedTensor], path: &Path) -> Result<ParamSet<f32>> {
    let mut out = ParamSet::new(template.role());
    for (name, t) in template.iter() {
        let key = format!("{prefix}/{name}");
        let stored = tensors.iter().find(|n| n.name == key).ok_or_else(|| bad(path, format!("missing tensor `{key}`")))?;
        if stored.shape != t.shape() {
            return Err(bad(path, format!("tensor `{key}` has shape {:?}, the model needs {:?}", stored.shape, t.shape())));
        }
        let t = Tensor::from_vec(&stored.shape, stored.data.clone()).map_err(metaforge::Error::from)?;
        out.insert(name, t).map_err(metaforge::Error::from)?;
    }
    let extra = tensors.iter().filter(|n| n.name.starts_with(&format!("{prefix}/"))).count();
    if extra != template.len() {
        return Err(bad(path, format!("`{prefix}` holds {extra} tensors, the model has {}", template.len())));
    }
    Ok(out)
}

pub fn model_from_checkpoint(template: &Model<f32>, ckpt: &Checkpoint, path: &Path) -> Result<Model<f32>> {
    let mut m = template.clone();
    m.encoder = set_from(&template.encoder, "encoder", &ckpt.tensors, path)?;
    m.head = set_from(&template.head, "head", &ckpt.tensors, path)?;
    if let Some(h) = &mut m.hyper {
        h.params = set_from(&h.params, "hyper", &ckpt.tensors, path)?;
    } else if ckpt.tensors.iter().any(|t| t.name.starts_with("hyper/")) {
        return Err(bad(path, "checkpoint has a hypernetwork but the configuration does not"));
    }
    Ok(m)
}

fn optimizer_from_checkpoint(template: &ModelOptimizer<f32>, ckpt: &Checkpoint, path: &Path) -> Result<ModelOptimizer<f32>> {
    let restore = |name: &str, s: &AdamState<f32>| -> Result<AdamState<f32>> {
        let blob = ckpt
            .optimizer
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| bad(path, format!("missing optimizer state `{name}`")))?;
        Ok(AdamState { step: blob.step, m: set_from(&s.m, "m", &blob.tensors, path)?, v: set_from(&s.v, "v", &blob.tensors, path)? })
    };
    Ok(ModelOptimizer {
        cfg: template.cfg,
        encoder: restore("encoder", &template.encoder)?,
        head: restore("head", &template.head)?,
        hyper: template.hyper.as_ref().map(|h| restore("hyper", h)).transpose()?,
    })
}

pub fn write_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let err = |e: csv::Error| CliError::Checkpoint { path: path.into(), msg: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    if log.is_empty() {
        w.write_record(["epoch", "lambda", "lr", "train_loss", "val_accuracy", "val_ci95"]).map_err(err)?;
    }
    for r in log {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let err = |e: csv::Error| CliError::Checkpoint { path: path.into(), msg: e.to_string() };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().collect::<Result<Vec<EpochRecord>, _>>().map_err(err)
}

/// Everything a finished run leaves behind in memory.
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<EpochRecord>,
}

/// Trains `cfg.epochs` epochs into `cfg.out`, optionally continuing from a
/// checkpoint.
///
/// The output directory receives `config.toml`, `train_log.csv`,
/// `last.ckpt` after every epoch, `best.ckpt` whenever validation
/// accuracy improves, and `epoch-N.ckpt` every `checkpoint_every` epochs.
/// Episode `i` of epoch `e` is training episode `e·episodes_per_epoch + i`,
/// so a resumed run replays exactly what an uninterrupted one would.
pub fn train_loop(cfg: RunConfig, resume: Option<&Path>, force: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, &Checkpoint::load(p)?, p, force)?,
        None => Trainer::new(cfg)?,
    };
    trainer.cfg.save(&out.join("config.toml"))?;
    let log_path = out.join("train_log.csv");
    let mut log = match resume {
        Some(_) if log_path.is_file() => read_log(&log_path)?.into_iter().filter(|r| r.epoch < trainer.epoch).collect(),
        _ => Vec::new(),
    };
    write_log(&log_path, &log)?;
    if trainer.epoch == 0 {
        trainer.checkpoint().save(&out.join("last.ckpt"))?;
    }

    while trainer.epoch < trainer.cfg.epochs {
        let mut rec = trainer.train_epoch()?;
        let done = trainer.epoch;
        let cfg = &trainer.cfg;
        let validate = cfg.val_every > 0 && done % cfg.val_every == 0;
        if validate {
            let r = trainer.evaluate(Split::Val, cfg.val_episodes, cfg.seed)?;
            rec.val_accuracy = Some(r.accuracy_mean);
            rec.val_ci95 = Some(r.accuracy_ci95);
            let acc = r.accuracy_mean as f32;
            if trainer.best_val.is_none_or(|b| acc > b) {
                trainer.best_val = Some(acc);
                trainer.checkpoint().save(&out.join("best.ckpt"))?;
            }
        }
        log::info!(
            "epoch {}/{}  λ {:.3}  lr {:.2e}  loss {:.4}{}",
            done,
            trainer.cfg.epochs,
            rec.lambda,
            rec.lr,
            rec.train_loss,
            rec.val_accuracy.map(|a| format!("  val {:.2}% ± {:.2}", 100.0 * a, 100.0 * rec.val_ci95.unwrap_or(0.0))).unwrap_or_default()
        );
        log.push(rec);
        write_log(&log_path, &log)?;
        let ckpt = trainer.checkpoint();
        ckpt.save(&out.join("last.ckpt"))?;
        if trainer.cfg.checkpoint_every > 0 && done % trainer.cfg.checkpoint_every == 0 {
            ckpt.save(&out.join(format!("epoch-{done}.ckpt")))?;
        }
    }
    Ok(TrainOutcome { trainer, log })
}
