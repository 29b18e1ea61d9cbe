use super::{GradMap, ParamSet, Tensor, TensorError};

/// Central-difference gradient of `f` at `point`, one coordinate at a time:
/// `(f(p + εe) − f(p − εe)) / 2ε`.
pub fn finite_diff_grad<E, F>(f: F, point: &ParamSet<f64>, epsilon: f64) -> Result<GradMap<f64>, E>
where
    F: Fn(&ParamSet<f64>) -> Result<f64, E>,
    E: From<TensorError>,
{
    if !(epsilon > 0.0) {
        return Err(TensorError::InvalidArgument { op: "finite_diff_grad", msg: format!("epsilon {epsilon}") }.into());
    }
    let base = point.detach();
    let flat = base.flatten();
    let eval = |v: &[f64]| -> Result<f64, E> {
        let y = f(&base.unflatten(v)?)?;
        if y.is_finite() {
            Ok(y)
        } else {
            Err(TensorError::NonFiniteEvaluation.into())
        }
    };
    let mut out = Vec::with_capacity(flat.len());
    let mut probe = flat.clone();
    for i in 0..flat.len() {
        probe[i] = flat[i] + epsilon;
        let hi = eval(&probe)?;
        probe[i] = flat[i] - epsilon;
        let lo = eval(&probe)?;
        probe[i] = flat[i];
        out.push((hi - lo) / (2.0 * epsilon));
    }
    let mut grads = GradMap::default();
    let mut offset = 0;
    for (name, t) in base.iter() {
        let n = t.numel();
        grads.insert(name, Tensor::from_vec(t.shape(), out[offset..offset + n].to_vec())?);
        offset += n;
    }
    Ok(grads)
}
