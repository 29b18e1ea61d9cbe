//! Episode sources built from a run configuration.

use std::sync::Arc;

use metaforge::tasks::{
    derive_seed, episode_rng, gaussian2d_episode, ClassSource, split_classes, split_cross_domain, Episode, Gaussian2dConfig, GlyphFamily,
    ImageFolder, Split, TaskFamily, TOY_TASKS,
};
use rand::Rng;

use crate::config::{RunConfig, TaskConfig};
use crate::error::Result;

/// Offset of the per-task streams of the 2-D toy, away from the mixed streams.
const TOY_TASK_STREAM: u64 = 0x746f_795f_7461_736b;

pub enum EpisodeSource {
    Toy { geometry: Gaussian2dConfig, seed: u64 },
    Family(TaskFamily),
}

impl EpisodeSource {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        Ok(match &cfg.task {
            TaskConfig::Toy2d { geometry } => EpisodeSource::Toy { geometry: geometry.clone(), seed: cfg.seed },
            TaskConfig::Glyphs { glyphs, split, split_seed } => {
                let fam = Arc::new(GlyphFamily::new("glyphs", glyphs.clone())?);
                let splits = split_classes(&fam.classes(), *split, *split_seed)?;
                EpisodeSource::Family(TaskFamily::with_splits(vec![fam], splits, cfg.seed)?)
            }
            TaskConfig::GlyphsCross { source, target, val_ratio, split_seed } => {
                let a = Arc::new(GlyphFamily::new("glyphs-source", source.clone())?);
                let b = Arc::new(GlyphFamily::new("glyphs-target", target.clone())?);
                let splits = split_cross_domain(&a.classes(), &b.classes(), *val_ratio, *split_seed)?;
                EpisodeSource::Family(TaskFamily::with_splits(vec![a, b], splits, cfg.seed)?)
            }
            TaskConfig::Folder { root, channels, height, width, split, split_seed, min_per_class } => {
                let folder = Arc::new(ImageFolder::load(root, *channels, *height, *width, *min_per_class)?);
                let splits = split_classes(&folder.classes(), *split, *split_seed)?;
                EpisodeSource::Family(TaskFamily::with_splits(vec![folder], splits, cfg.seed)?)
            }
        })
    }

    /// Episode `index` of `split`, a pure function of the configuration and
    /// the arguments.
    pub fn episode(&self, split: Split, n_way: usize, k_shot: usize, q_per_class: usize, index: u64) -> metaforge::Result<Episode> {
        match self {
            EpisodeSource::Toy { geometry, seed } => {
                let mut rng = episode_rng(derive_seed(*seed, split.tag()), index);
                let task = rng.random_range(0..TOY_TASKS);
                gaussian2d_episode(geometry, task, k_shot, q_per_class, &mut rng)
            }
            EpisodeSource::Family(f) => f.episode(split, n_way, k_shot, q_per_class, index),
        }
    }

    /// Episode `index` of one fixed toy task; `None` for other sources.
    pub fn toy_task_episode(&self, task: usize, split: Split, k_shot: usize, q_per_class: usize, index: u64) -> Option<metaforge::Result<Episode>> {
        match self {
            EpisodeSource::Toy { geometry, seed } => {
                let stream = derive_seed(derive_seed(*seed, split.tag()), TOY_TASK_STREAM + task as u64);
                let mut rng = episode_rng(stream, index);
                Some(gaussian2d_episode(geometry, task, k_shot, q_per_class, &mut rng))
            }
            EpisodeSource::Family(_) => None,
        }
    }
}
