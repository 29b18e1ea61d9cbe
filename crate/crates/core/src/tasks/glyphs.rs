use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, ClassKey, ClassSource};
use crate::error::{Error, Result};

const SIDE: usize = 28;
const SEGMENTS: usize = 12;

/// Procedural handwriting-like classes on a 28×28 canvas.
///
/// Each class is a fixed set of quadratic Bézier strokes drawn from its own
/// seed. Every sample re-draws the class under a small random rotation,
/// scale and shift, perturbs the control points, and adds pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphConfig {
    pub n_classes: usize,
    pub min_strokes: usize,
    pub max_strokes: usize,
    /// Rotation jitter, radians (standard deviation).
    pub rotation: f64,
    /// Relative scale jitter (standard deviation).
    pub scale: f64,
    /// Translation jitter, pixels (standard deviation).
    pub shift: f64,
    /// Per-sample control-point wobble, pixels (standard deviation).
    pub wobble: f64,
    /// Additive pixel noise (standard deviation).
    pub noise: f64,
    pub seed: u64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            n_classes: 200,
            min_strokes: 2,
            max_strokes: 4,
            rotation: 0.12,
            scale: 0.06,
            shift: 1.0,
            wobble: 0.6,
            noise: 0.08,
            seed: 0x676c_7970_6873,
        }
    }
}

impl GlyphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.min_strokes == 0 || self.min_strokes > self.max_strokes {
            return Err(Error::config("glyphs need at least one class and 1 ≤ min_strokes ≤ max_strokes"));
        }
        let jitter = [self.rotation, self.scale, self.shift, self.wobble, self.noise];
        if jitter.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("glyph jitter parameters must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stroke {
    points: [(f64, f64); 3],
    width: f64,
}

#[derive(Clone, Debug)]
pub struct GlyphFamily {
    name: String,
    cfg: GlyphConfig,
    classes: Vec<Vec<Stroke>>,
}

impl GlyphFamily {
    pub fn new(name: impl Into<String>, cfg: GlyphConfig) -> Result<Self> {
        cfg.validate()?;
        let classes = (0..cfg.n_classes)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, c as u64));
                let n = rng.random_range(cfg.min_strokes..=cfg.max_strokes);
                (0..n)
                    .map(|_| Stroke {
                        points: [(); 3].map(|_| (rng.random_range(5.0..23.0), rng.random_range(5.0..23.0))),
                        width: rng.random_range(1.0..1.8),
                    })
                    .collect()
            })
            .collect();
        Ok(Self { name: name.into(), cfg, classes })
    }

    pub fn config(&self) -> &GlyphConfig {
        &self.cfg
    }

    /// One 28×28 image of `class`, fully determined by `(class, sample_seed)`.
    pub fn render(&self, class: usize, sample_seed: u64) -> Result<Vec<f32>> {
        let strokes = self
            .classes
            .get(class)
            .ok_or_else(|| Error::Task(format!("glyph class {class} out of range 0..{}", self.classes.len())))?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut n = || unit.sample(&mut rng);
        let angle = self.cfg.rotation * n();
        let scale = 1.0 + self.cfg.scale * n();
        let (dx, dy) = (self.cfg.shift * n(), self.cfg.shift * n());
        let (sin, cos) = angle.sin_cos();
        let c = (SIDE as f64 - 1.0) / 2.0;
        let transform = |(x, y): (f64, f64)| {
            let (u, v) = (x - c, y - c);
            (c + scale * (cos * u - sin * v) + dx, c + scale * (sin * u + cos * v) + dy)
        };

        let mut segments: Vec<((f64, f64), (f64, f64), f64)> = Vec::with_capacity(strokes.len() * SEGMENTS);
        for s in strokes {
            let p = s.points.map(|(x, y)| transform((x + self.cfg.wobble * n(), y + self.cfg.wobble * n())));
            let at = |t: f64| {
                let (a, b, cc) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
                (a * p[0].0 + b * p[1].0 + cc * p[2].0, a * p[0].1 + b * p[1].1 + cc * p[2].1)
            };
            for i in 0..SEGMENTS {
                segments.push((at(i as f64 / SEGMENTS as f64), at((i + 1) as f64 / SEGMENTS as f64), s.width));
            }
        }

        // Ink is exp(−d²/w²) for the nearest segment; pixels more than three
        // stroke widths outside every segment's box stay blank.
        let mut nearest = vec![f64::INFINITY; SIDE * SIDE];
        for &(a, b, w) in &segments {
            let r = 3.0 * w;
            let lo = |u: f64, v: f64| ((u.min(v) - r).floor().max(0.0)) as usize;
            let hi = |u: f64, v: f64| ((u.max(v) + r).ceil().min(SIDE as f64 - 1.0)).max(-1.0);
            let (x1, y1) = (hi(a.0, b.0), hi(a.1, b.1));
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            let inv_w2 = 1.0 / (w * w);
            for y in lo(a.1, b.1)..=y1 as usize {
                for x in lo(a.0, b.0)..=x1 as usize {
                    let ratio = segment_dist2((x as f64, y as f64), a, b) * inv_w2;
                    let px = &mut nearest[y * SIDE + x];
                    if ratio < *px {
                        *px = ratio;
                    }
                }
            }
        }
        let img = nearest.iter().map(|&r| ((-r).exp() + self.cfg.noise * n()).clamp(0.0, 1.0) as f32).collect();
        Ok(img)
    }
}

fn segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (ex, ey) = (wx - t * vx, wy - t * vy);
    ex * ex + ey * ey
}

impl ClassSource for GlyphFamily {
    fn family(&self) -> &str {
        &self.name
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![1, SIDE, SIDE]
    }

    fn classes(&self) -> Vec<ClassKey> {
        (0..self.classes.len())
            .map(|c| ClassKey { family: self.name.clone(), class: c, name: format!("glyph{c:04}") })
            .collect()
    }

    fn sample(&self, class: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(count * SIDE * SIDE);
        for _ in 0..count {
            out.extend(self.render(class, rng.random())?);
        }
        Ok(out)
    }
}
