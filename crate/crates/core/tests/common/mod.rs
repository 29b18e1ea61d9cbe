#![allow(dead_code)]

pub mod checks;

use metaforge::tensor::{GradMap, ParamSet};
use metaforge::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over all entries.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Gradient entries in parameter order.
pub fn flat_in_order(params: &ParamSet<f64>, g: &GradMap<f64>) -> Vec<f64> {
    params.names().flat_map(|n| g.req(n).unwrap().to_vec()).collect()
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn randn(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, normal_vec(rng, n, scale)).unwrap()
}
