//! Episodic N-way K-shot task generation.
//!
//! Class-pool families ([`GlyphFamily`], [`ImageFolder`]) implement
//! [`ClassSource`] and are sampled through a [`TaskFamily`], which owns the
//! train/val/test partition. The 2-D toy is task-indexed rather than
//! class-indexed and has its own sampler, [`gaussian2d_episode`].

mod folder;
mod gaussian;
mod glyphs;

use std::fmt;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use folder::ImageFolder;
pub use gaussian::{gaussian2d_episode, Gaussian2dConfig, TOY_TASKS};
pub use glyphs::{GlyphConfig, GlyphFamily};

/// One few-shot problem. Support and query are stored class-major: the
/// first `k_shot` support rows are class 0, the next `k_shot` class 1, and
/// so on; likewise for the query with `q_per_class`.
#[derive(Clone, Debug)]
pub struct Episode<T: Scalar = f32> {
    pub support_x: Tensor<T>,
    pub support_y: Vec<usize>,
    pub query_x: Tensor<T>,
    pub query_y: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
}

impl<T: Scalar> Episode<T> {
    /// Assembles an episode from per-class sample buffers, each holding
    /// `k_shot + q_per_class` flattened examples of `input_shape`.
    pub fn from_class_samples(
        input_shape: &[usize],
        per_class: Vec<Vec<T>>,
        k_shot: usize,
        q_per_class: usize,
    ) -> Result<Self> {
        let n_way = per_class.len();
        let d: usize = input_shape.iter().product();
        let mut sx = Vec::with_capacity(n_way * k_shot * d);
        let mut qx = Vec::with_capacity(n_way * q_per_class * d);
        for (c, samples) in per_class.iter().enumerate() {
            if samples.len() != (k_shot + q_per_class) * d {
                return Err(Error::Task(format!("class {c} has {} values, expected {}", samples.len(), (k_shot + q_per_class) * d)));
            }
            sx.extend_from_slice(&samples[..k_shot * d]);
            qx.extend_from_slice(&samples[k_shot * d..]);
        }
        let shape = |rows: usize| {
            let mut s = vec![rows];
            s.extend_from_slice(input_shape);
            s
        };
        let ep = Self {
            support_x: Tensor::from_vec(&shape(n_way * k_shot), sx)?,
            support_y: (0..n_way).flat_map(|c| std::iter::repeat_n(c, k_shot)).collect(),
            query_x: Tensor::from_vec(&shape(n_way * q_per_class), qx)?,
            query_y: (0..n_way).flat_map(|c| std::iter::repeat_n(c, q_per_class)).collect(),
            n_way,
            k_shot,
            q_per_class,
        };
        ep.validate()?;
        Ok(ep)
    }

    /// Checks row counts, label range and per-class counts.
    pub fn validate(&self) -> Result<()> {
        let check = |what: &str, x: &Tensor<T>, y: &[usize], per: usize| -> Result<()> {
            if x.shape().first() != Some(&y.len()) || y.len() != self.n_way * per {
                return Err(Error::Task(format!(
                    "{what}: {} rows, {} labels, expected {}",
                    x.shape().first().copied().unwrap_or(0),
                    y.len(),
                    self.n_way * per
                )));
            }
            let mut counts = vec![0usize; self.n_way];
            for &l in y {
                if l >= self.n_way {
                    return Err(Error::Task(format!("{what}: label {l} outside 0..{}", self.n_way)));
                }
                counts[l] += 1;
            }
            if let Some(c) = counts.iter().position(|&n| n != per) {
                return Err(Error::Task(format!("{what}: class {c} appears {} times, expected {per}", counts[c])));
            }
            Ok(())
        };
        if self.n_way < 2 || self.k_shot == 0 || self.q_per_class == 0 {
            return Err(Error::Task("episodes need n_way ≥ 2, k_shot ≥ 1 and q_per_class ≥ 1".into()));
        }
        check("support", &self.support_x, &self.support_y, self.k_shot)?;
        check("query", &self.query_x, &self.query_y, self.q_per_class)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.support_x.shape()[1..]
    }

    pub fn cast<U: Scalar>(&self) -> Episode<U> {
        Episode {
            support_x: self.support_x.cast(),
            support_y: self.support_y.clone(),
            query_x: self.query_x.cast(),
            query_y: self.query_y.clone(),
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_per_class: self.q_per_class,
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `index` under `seed`; independent of how many other
/// streams were drawn, so episodes can be generated in any order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// Stream tag mixed into episode seeds so splits never share a stream.
    pub fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e,
            Split::Val => 0x76_616c,
            Split::Test => 0x74_6573_74,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// A class, namespaced by the family it came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassKey {
    pub family: String,
    pub class: usize,
    pub name: String,
}

impl fmt::Display for ClassKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.family, self.name)
    }
}

/// Anything that can draw labeled examples of a fixed set of classes.
pub trait ClassSource: Send + Sync {
    fn family(&self) -> &str;
    fn input_shape(&self) -> Vec<usize>;
    fn classes(&self) -> Vec<ClassKey>;
    /// `count` flattened examples of `class`, concatenated.
    fn sample(&self, class: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f32>>;
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassSplits {
    pub train: Vec<ClassKey>,
    pub val: Vec<ClassKey>,
    pub test: Vec<ClassKey>,
}

impl ClassSplits {
    pub fn get(&self, split: Split) -> &[ClassKey] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut all: Vec<String> = [&self.train, &self.val, &self.test].iter().flat_map(|p| p.iter().map(ToString::to_string)).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        all.len() == n
    }
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios must be positive and sum to 1, got {ratios:?}")));
    }
    Ok(())
}

/// Sizes by largest remainder, so they always add up to `n`.
fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let short = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        sizes[i] += 1;
    }
    sizes
}

fn shuffled(pool: &[ClassKey], seed: u64) -> Vec<ClassKey> {
    let mut v = pool.to_vec();
    v.sort();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed)));
    v
}

/// Deterministic disjoint train/val/test partition of one class pool.
pub fn split_classes(pool: &[ClassKey], ratios: [f64; 3], seed: u64) -> Result<ClassSplits> {
    check_ratios(&ratios)?;
    let sizes = apportion(pool.len(), &ratios);
    if sizes.contains(&0) {
        return Err(Error::Task(format!("{} classes cannot fill three nonempty splits with ratios {ratios:?}", pool.len())));
    }
    let v = shuffled(pool, seed);
    let (train, rest) = v.split_at(sizes[0]);
    let (val, test) = rest.split_at(sizes[1]);
    Ok(ClassSplits { train: train.to_vec(), val: val.to_vec(), test: test.to_vec() })
}

/// Train on every class of `first`; split `second` into val/test.
pub fn split_cross_domain(first: &[ClassKey], second: &[ClassKey], val_ratio: f64, seed: u64) -> Result<ClassSplits> {
    check_ratios(&[val_ratio, 1.0 - val_ratio])?;
    if first.is_empty() {
        return Err(Error::Task("cross-domain training family has no classes".into()));
    }
    let sizes = apportion(second.len(), &[val_ratio, 1.0 - val_ratio]);
    if sizes.contains(&0) {
        return Err(Error::Task(format!("{} classes cannot fill nonempty val and test splits", second.len())));
    }
    let v = shuffled(second, seed);
    let (val, test) = v.split_at(sizes[0]);
    let mut train = first.to_vec();
    train.sort();
    let splits = ClassSplits { train, val: val.to_vec(), test: test.to_vec() };
    if !splits.is_disjoint() {
        return Err(Error::Task("cross-domain families share a name; class keys collide".into()));
    }
    Ok(splits)
}

/// Class-pool families plus their partition and an episode seed.
#[derive(Clone)]
pub struct TaskFamily {
    sources: Vec<Arc<dyn ClassSource>>,
    splits: ClassSplits,
    seed: u64,
}

impl fmt::Debug for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskFamily")
            .field("families", &self.sources.iter().map(|s| s.family().to_string()).collect::<Vec<_>>())
            .field("splits", &(self.splits.train.len(), self.splits.val.len(), self.splits.test.len()))
            .field("seed", &self.seed)
            .finish()
    }
}

impl TaskFamily {
    pub fn new(source: Arc<dyn ClassSource>, ratios: [f64; 3], seed: u64) -> Result<Self> {
        let splits = split_classes(&source.classes(), ratios, seed)?;
        Self::with_splits(vec![source], splits, seed)
    }

    pub fn cross_domain(first: Arc<dyn ClassSource>, second: Arc<dyn ClassSource>, val_ratio: f64, seed: u64) -> Result<Self> {
        let splits = split_cross_domain(&first.classes(), &second.classes(), val_ratio, seed)?;
        Self::with_splits(vec![first, second], splits, seed)
    }

    pub fn with_splits(sources: Vec<Arc<dyn ClassSource>>, splits: ClassSplits, seed: u64) -> Result<Self> {
        let shape = sources.first().ok_or_else(|| Error::Task("task family needs a source".into()))?.input_shape();
        if sources.iter().any(|s| s.input_shape() != shape) {
            return Err(Error::Task("all families must share one input shape".into()));
        }
        for key in Split::ALL.iter().flat_map(|&s| splits.get(s)) {
            if !sources.iter().any(|s| s.family() == key.family) {
                return Err(Error::Task(format!("class {key} refers to an unknown family")));
            }
        }
        Ok(Self { sources, splits, seed })
    }

    pub fn splits(&self) -> &ClassSplits {
        &self.splits
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.sources[0].input_shape()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Episode number `index` of `split`; fully determined by
    /// `(family, seed, split, index)`.
    pub fn episode(&self, split: Split, n_way: usize, k_shot: usize, q_per_class: usize, index: u64) -> Result<Episode> {
        let mut rng = episode_rng(derive_seed(self.seed, split.tag()), index);
        self.episode_with_rng(split, n_way, k_shot, q_per_class, &mut rng)
    }

    pub fn episode_with_rng(
        &self,
        split: Split,
        n_way: usize,
        k_shot: usize,
        q_per_class: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Episode> {
        let pool = self.splits.get(split);
        if pool.len() < n_way {
            return Err(Error::Task(format!("{split} split has {} classes, {n_way}-way episodes need more", pool.len())));
        }
        let chosen: Vec<&ClassKey> = pool.choose_multiple(rng, n_way).collect();
        let mut per_class = Vec::with_capacity(n_way);
        for key in chosen {
            let source = self.sources.iter().find(|s| s.family() == key.family).expect("checked at construction");
            per_class.push(source.sample(key.class, k_shot + q_per_class, rng)?);
        }
        Episode::from_class_samples(&self.input_shape(), per_class, k_shot, q_per_class)
    }
}
