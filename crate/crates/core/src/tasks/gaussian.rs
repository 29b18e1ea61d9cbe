use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Episode;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Number of tasks in the 2-D toy family.
pub const TOY_TASKS: usize = 4;

/// Geometry of the 2-D toy.
///
/// In the horizontal orientation the two classes are long thin ellipses
/// centred at `(−offset, +shift)` and `(+offset, −shift)`, stretched along x.
/// Vertical tasks rotate the plane by 90°. Odd task ids swap the labels, so
/// tasks 0/1 and 2/3 share inputs and disagree on every label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gaussian2dConfig {
    pub offset: f64,
    pub shift: f64,
    pub std_long: f64,
    pub std_short: f64,
}

impl Default for Gaussian2dConfig {
    fn default() -> Self {
        Self { offset: 2.0, shift: 0.6, std_long: 3.0, std_short: 0.2 }
    }
}

impl Gaussian2dConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.offset, self.shift, self.std_long, self.std_short].iter().all(|v| v.is_finite())
            && self.std_long > 0.0
            && self.std_short > 0.0;
        if !ok {
            return Err(Error::config("gaussian2d constants must be finite with positive deviations"));
        }
        Ok(())
    }

    fn check_task(task_id: usize) -> Result<()> {
        if task_id >= TOY_TASKS {
            return Err(Error::Task(format!("toy task id must be in 0..{TOY_TASKS}, got {task_id}")));
        }
        Ok(())
    }

    fn rotate(task_id: usize, (x, y): (f64, f64)) -> (f64, f64) {
        if task_id >= 2 {
            (-y, x)
        } else {
            (x, y)
        }
    }

    fn unrotate(task_id: usize, (x, y): (f64, f64)) -> (f64, f64) {
        if task_id >= 2 {
            (y, -x)
        } else {
            (x, y)
        }
    }

    /// Draws one point of the ellipse that carries `label` in `task_id`.
    pub fn sample_point(&self, task_id: usize, label: usize, rng: &mut impl Rng) -> (f64, f64) {
        let cluster = label ^ (task_id & 1);
        let sign = if cluster == 0 { -1.0 } else { 1.0 };
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        Self::rotate(task_id, (sign * self.offset + self.std_long * z1, -sign * self.shift + self.std_short * z2))
    }

    /// Label of the Bayes-optimal classifier under the true generative model.
    pub fn bayes_label(&self, task_id: usize, point: (f64, f64)) -> usize {
        // Equal covariances, so the optimal rule is linear through the origin.
        let (x, y) = Self::unrotate(task_id, point);
        let score = x * self.offset / self.std_long.powi(2) - y * self.shift / self.std_short.powi(2);
        usize::from(score > 0.0) ^ (task_id & 1)
    }
}

/// One toy episode: a 2-way problem with `k_shot` support and
/// `q_per_class` query points per class.
pub fn gaussian2d_episode<T: Scalar>(
    cfg: &Gaussian2dConfig,
    task_id: usize,
    k_shot: usize,
    q_per_class: usize,
    rng: &mut impl Rng,
) -> Result<Episode<T>> {
    Gaussian2dConfig::check_task(task_id)?;
    cfg.validate()?;
    let per_class = (0..2)
        .map(|label| {
            (0..k_shot + q_per_class)
                .flat_map(|_| {
                    let (x, y) = cfg.sample_point(task_id, label, rng);
                    [T::of_f64(x), T::of_f64(y)]
                })
                .collect()
        })
        .collect();
    Episode::from_class_samples(&[2], per_class, k_shot, q_per_class)
}
