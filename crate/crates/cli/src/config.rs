//! Run configuration: one TOML document per experiment.
//!
//! Every field has a default, so a file only needs the keys it changes.
//! Unknown keys are rejected. A few values are derived rather than read:
//! the encoder input shape comes from the task, and the hypernetwork's
//! embedding width and class count come from the encoder and `n_way`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use metaforge::meta::{AdamConfig, Algorithm, HyperMamlConfig, MamlConfig, SwitchMode};
use metaforge::nn::{EncoderConfig, EncoderVariant, InitScheme};
use metaforge::tasks::{Gaussian2dConfig, GlyphConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Label copied into reports.
    pub name: String,
    /// Root of every random stream: initialization, episodes, evaluation.
    pub seed: u64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Episodes per meta-step; must divide `episodes_per_epoch`.
    pub meta_batch: usize,
    /// Workers for per-episode meta-gradients. Results do not depend on it.
    pub threads: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    /// Validate every this many epochs; 0 disables validation.
    pub val_every: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    /// Also keep `epoch-N.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Epochs at which the meta learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub init: InitScheme,
    /// Output directory for checkpoints, logs and reports.
    pub out: PathBuf,
    pub adam: AdamConfig,
    pub encoder: EncoderConfig,
    pub task: TaskConfig,
    pub algorithm: Algorithm,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            epochs: 100,
            episodes_per_epoch: 100,
            meta_batch: 4,
            threads: 1,
            n_way: 5,
            k_shot: 1,
            q_per_class: 16,
            val_every: 10,
            val_episodes: 100,
            test_episodes: 600,
            checkpoint_every: 0,
            lr_milestones: Vec::new(),
            lr_decay: 0.3,
            init: InitScheme::KaimingUniform,
            out: PathBuf::from("runs/run"),
            adam: AdamConfig::default(),
            encoder: EncoderConfig::default(),
            task: TaskConfig::default(),
            algorithm: Algorithm::HyperMaml(HyperMamlConfig::default()),
        }
    }
}

/// Where episodes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    /// The four-task 2-D family; each episode picks one task at random.
    Toy2d {
        #[serde(default)]
        geometry: Gaussian2dConfig,
    },
    /// Procedural glyph classes split into train/val/test pools.
    Glyphs {
        #[serde(default)]
        glyphs: GlyphConfig,
        #[serde(default = "default_split")]
        split: [f64; 3],
        #[serde(default)]
        split_seed: u64,
    },
    /// Train on one glyph family, validate and test on another.
    GlyphsCross {
        #[serde(default)]
        source: GlyphConfig,
        #[serde(default = "second_glyph_family")]
        target: GlyphConfig,
        #[serde(default = "default_val_ratio")]
        val_ratio: f64,
        #[serde(default)]
        split_seed: u64,
    },
    /// One sub-directory of images per class.
    Folder {
        root: PathBuf,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default = "default_side")]
        height: usize,
        #[serde(default = "default_side")]
        width: usize,
        #[serde(default = "default_split")]
        split: [f64; 3],
        #[serde(default)]
        split_seed: u64,
        /// Classes with fewer readable images are skipped.
        #[serde(default = "default_min_per_class")]
        min_per_class: usize,
    },
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self::Glyphs { glyphs: GlyphConfig::default(), split: default_split(), split_seed: 0 }
    }
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn second_glyph_family() -> GlyphConfig {
    GlyphConfig { seed: 0x6879_7065_7262, ..GlyphConfig::default() }
}

fn default_val_ratio() -> f64 {
    0.5
}

fn default_channels() -> usize {
    1
}

fn default_side() -> usize {
    28
}

fn default_min_per_class() -> usize {
    2
}

impl TaskConfig {
    /// Per-example input shape the task produces.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            TaskConfig::Toy2d { .. } => vec![2],
            TaskConfig::Glyphs { .. } | TaskConfig::GlyphsCross { .. } => vec![1, 28, 28],
            TaskConfig::Folder { channels, height, width, .. } => vec![*channels, *height, *width],
        }
    }

    pub fn is_toy(&self) -> bool {
        matches!(self, TaskConfig::Toy2d { .. })
    }
}

/// Shipped presets, by name.
pub const PRESETS: [(&str, &str); 5] = [
    ("toy2d-maml1", include_str!("../presets/toy2d-maml1.toml")),
    ("toy2d-maml5", include_str!("../presets/toy2d-maml5.toml")),
    ("toy2d-hypermaml", include_str!("../presets/toy2d-hypermaml.toml")),
    ("glyphs-5w1s", include_str!("../presets/glyphs-5w1s.toml")),
    ("glyphs-5w5s", include_str!("../presets/glyphs-5w5s.toml")),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AlgorithmChoice {
    Maml,
    /// MAML with the first-order approximation.
    Fomaml,
    Hypermaml,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SwitchChoice {
    /// No warm-up: the hypernetwork update is used from the first epoch.
    None,
    UpdateBlend,
    LossBlend,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub algorithm: Option<AlgorithmChoice>,
    pub inner_steps: Option<usize>,
    pub first_order: bool,
    pub switch_mode: Option<SwitchChoice>,
    pub no_enhancement: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {}", origin.display(), e.message())))?;
        cfg.derive_dependent();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(CliError::MissingConfig(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            CliError::Config(format!("unknown preset `{name}`; available: {}", names.join(", ")))
        })?;
        Self::from_toml(text, Path::new(name))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable as TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| CliError::io(path, e))
    }

    /// Fills in the values that follow from other sections.
    fn derive_dependent(&mut self) {
        self.encoder.input_shape = self.task.input_shape();
        let embed = self.encoder.output_dim();
        if let Algorithm::HyperMaml(h) = &mut self.algorithm {
            h.hypernet.embed_dim = embed;
            h.hypernet.n_way = self.n_way;
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(threads) = o.threads {
            self.threads = threads;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(epochs) = o.epochs {
            self.epochs = epochs;
        }
        let meta_lr = self.algorithm.meta_lr();
        match (o.algorithm, &self.algorithm) {
            (Some(AlgorithmChoice::Maml | AlgorithmChoice::Fomaml), Algorithm::HyperMaml(_)) => {
                self.algorithm = Algorithm::Maml(MamlConfig { meta_lr, ..MamlConfig::default() });
            }
            (Some(AlgorithmChoice::Hypermaml), Algorithm::Maml(_)) => {
                self.algorithm = Algorithm::HyperMaml(HyperMamlConfig { meta_lr, ..HyperMamlConfig::default() });
            }
            _ => {}
        }
        let first_order = o.first_order || o.algorithm == Some(AlgorithmChoice::Fomaml);
        match &mut self.algorithm {
            Algorithm::Maml(m) => {
                if let Some(steps) = o.inner_steps {
                    m.inner_steps = steps;
                }
                m.first_order |= first_order;
                if o.switch_mode.is_some() || o.no_enhancement {
                    return Err(CliError::Config("--switch-mode and --no-enhancement apply to HyperMAML only".into()));
                }
            }
            Algorithm::HyperMaml(h) => {
                if o.inner_steps.is_some() {
                    return Err(CliError::Config("--inner-steps applies to MAML only".into()));
                }
                h.first_order |= first_order;
                match o.switch_mode {
                    Some(SwitchChoice::None) => h.warmup = None,
                    Some(SwitchChoice::UpdateBlend) => {
                        h.switch_mode = SwitchMode::UpdateBlend;
                        h.warmup.get_or_insert(default_warmup(self.epochs));
                    }
                    Some(SwitchChoice::LossBlend) => {
                        h.switch_mode = SwitchMode::LossBlend;
                        h.warmup.get_or_insert(default_warmup(self.epochs));
                    }
                    None => {}
                }
                if o.no_enhancement {
                    h.hypernet.enhancement = false;
                }
            }
        }
        self.derive_dependent();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.n_way < 2 || self.k_shot == 0 || self.q_per_class == 0 {
            return bad(format!(
                "episodes need n_way ≥ 2, k_shot ≥ 1 and q_per_class ≥ 1, got {}/{}/{}",
                self.n_way, self.k_shot, self.q_per_class
            ));
        }
        if self.meta_batch == 0 || !self.episodes_per_epoch.is_multiple_of(self.meta_batch) {
            return bad(format!(
                "episodes_per_epoch ({}) must be a positive multiple of meta_batch ({})",
                self.episodes_per_epoch, self.meta_batch
            ));
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if self.val_every > 0 && self.val_episodes < 2 {
            return bad("validation needs at least two episodes".into());
        }
        if self.test_episodes < 2 {
            return bad("test_episodes must be at least 2".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.lr_milestones.windows(2).any(|w| !(w[0] < w[1])) || self.lr_milestones.iter().any(|m| !m.is_finite()) {
            return bad("lr_milestones must be finite and strictly increasing".into());
        }
        if self.task.is_toy() {
            if self.n_way != 2 {
                return bad(format!("the 2-D toy has two classes per task, n_way is {}", self.n_way));
            }
            if self.encoder.variant == EncoderVariant::Conv4 {
                return bad("the 2-D toy needs a linear2d or mlp encoder".into());
            }
        }
        match &self.task {
            TaskConfig::Toy2d { geometry } => geometry.validate()?,
            TaskConfig::Glyphs { glyphs, .. } => glyphs.validate()?,
            TaskConfig::GlyphsCross { source, target, val_ratio, .. } => {
                source.validate()?;
                target.validate()?;
                if !(*val_ratio > 0.0 && *val_ratio < 1.0) {
                    return bad(format!("val_ratio must lie in (0, 1), got {val_ratio}"));
                }
            }
            TaskConfig::Folder { channels, .. } => {
                if *channels != 1 && *channels != 3 {
                    return bad(format!("folder images are read with 1 or 3 channels, got {channels}"));
                }
            }
        }
        self.encoder.validate()?;
        self.algorithm.validate()?;
        Ok(())
    }

    /// Identity of everything that shapes the training trajectory. The
    /// name, output directory, thread count and epoch budget are left out
    /// so a run can be renamed, moved, or extended and still resumed.
    pub fn config_hash(&self) -> u64 {
        let mut c = self.clone();
        c.name.clear();
        c.out = PathBuf::new();
        c.threads = 1;
        c.epochs = 0;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("digest has at least 8 bytes"))
    }

    /// Warm-up weight λ used while training epoch `epoch` (0-based), and
    /// when evaluating a model that has completed `epoch` epochs.
    pub fn lambda(&self, epoch: usize) -> f64 {
        match &self.algorithm {
            Algorithm::HyperMaml(h) => h.lambda(epoch as f64),
            Algorithm::Maml(_) => 1.0,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        metaforge::meta::lr_schedule(epoch as f64, &self.lr_milestones, self.algorithm.meta_lr(), self.lr_decay)
    }
}

/// Warm-up milestones for a run of `epochs` epochs when none are configured,
/// at the same fractions of training as the 51/550-of-2048 schedule.
fn default_warmup(epochs: usize) -> [f64; 2] {
    let e = epochs.max(1) as f64;
    [(e * 51.0 / 2048.0).round(), (e * 550.0 / 2048.0).round().max(1.0)]
}
