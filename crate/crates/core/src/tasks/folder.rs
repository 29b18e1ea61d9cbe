use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::{ClassKey, ClassSource};
use crate::error::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Images laid out as `root/<class-name>/*.{png,jpg,jpeg}`, decoded once,
/// resized and scaled to `[0, 1]` in channel-major order.
#[derive(Clone, Debug)]
pub struct ImageFolder {
    name: String,
    shape: [usize; 3],
    class_names: Vec<String>,
    images: Vec<Vec<Vec<f32>>>,
}

impl ImageFolder {
    /// Loads every class directory under `root`. Files that fail to decode
    /// are skipped, and classes with fewer than `min_per_class` usable
    /// images are dropped, each with a warning.
    pub fn load(root: &Path, channels: usize, height: usize, width: usize, min_per_class: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::config(format!("image channels must be 1 or 3, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::config("image size must be positive"));
        }
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Task(format!("{} contains no class directories", root.display())));
        }

        let mut class_names = Vec::new();
        let mut images = Vec::new();
        for dir in dirs {
            let class = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            files.sort();
            let mut decoded = Vec::with_capacity(files.len());
            for f in &files {
                match image::open(f) {
                    Ok(img) => decoded.push(to_pixels(&img, channels, height, width)),
                    Err(e) => log::warn!("skipping {}: {e}", f.display()),
                }
            }
            if decoded.len() < min_per_class {
                log::warn!("excluding class {class}: {} usable images, need {min_per_class}", decoded.len());
                continue;
            }
            class_names.push(class);
            images.push(decoded);
        }
        if class_names.is_empty() {
            return Err(Error::Task(format!("{} has no class with at least {min_per_class} images", root.display())));
        }
        let name = root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "images".into());
        Ok(Self { name, shape: [channels, height, width], class_names, images })
    }

    /// Overrides the family name used to namespace class keys.
    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn images(&self, class: usize) -> Option<&[Vec<f32>]> {
        self.images.get(class).map(Vec::as_slice)
    }
}

fn to_pixels(img: &image::DynamicImage, channels: usize, height: usize, width: usize) -> Vec<f32> {
    let resized = img.resize_exact(width as u32, height as u32, FilterType::Triangle);
    let (plane, raw) = if channels == 1 {
        (height * width, resized.to_luma8().into_raw())
    } else {
        (height * width, resized.to_rgb8().into_raw())
    };
    // Interleaved HWC to planar CHW.
    let mut out = vec![0f32; channels * plane];
    for (i, &v) in raw.iter().enumerate() {
        out[(i % channels) * plane + i / channels] = f32::from(v) / 255.0;
    }
    out
}

impl ClassSource for ImageFolder {
    fn family(&self) -> &str {
        &self.name
    }

    fn input_shape(&self) -> Vec<usize> {
        self.shape.to_vec()
    }

    fn classes(&self) -> Vec<ClassKey> {
        self.class_names
            .iter()
            .enumerate()
            .map(|(i, n)| ClassKey { family: self.name.clone(), class: i, name: n.clone() })
            .collect()
    }

    fn sample(&self, class: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        let pool = self.images.get(class).ok_or_else(|| Error::Task(format!("no class {class} in {}", self.name)))?;
        if pool.len() < count {
            return Err(Error::Task(format!(
                "class {} has {} images, episode needs {count}",
                self.class_names[class],
                pool.len()
            )));
        }
        Ok(sample(rng, pool.len(), count).into_iter().flat_map(|i| pool[i].iter().copied()).collect())
    }
}
