use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Result, Scalar, Tape, Tensor, TensorError};

/// Which part of the model a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Encoder,
    Head,
    Hypernet,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Head => "head",
            Self::Hypernet => "hypernet",
        }
    }
}

/// Ordered, uniquely named collection of trainable tensors.
#[derive(Clone, Debug)]
pub struct ParamSet<T: Scalar = f32> {
    role: ParamRole,
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(role: ParamRole) -> Self {
        Self { role, tensors: IndexMap::new() }
    }

    pub fn role(&self) -> ParamRole {
        self.role
    }

    /// Adds a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(TensorError::InvalidArgument { op: "ParamSet::insert", msg: format!("duplicate name {name}") });
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, t: Tensor<T>) -> Result<Self> {
        self.insert(name, t)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    /// Like [`get`](Self::get) but reports the missing name.
    pub fn req(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| TensorError::InvalidArgument {
            op: "ParamSet::req",
            msg: format!("no parameter named {name} in {} set", self.role.as_str()),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn attach(&self, tape: &Tape<T>) -> Self {
        Self {
            role: self.role,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v))).collect(),
        }
    }

    pub fn detach(&self) -> Self {
        self.map_tensors(|t| t.detach())
    }

    pub fn map_tensors(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Self {
        Self { role: self.role, tensors: self.tensors.iter().map(|(k, v)| (k.clone(), f(v))).collect() }
    }

    /// Fallible elementwise combination with a gradient map of the same names.
    pub fn zip_grads(
        &self,
        grads: &GradMap<T>,
        f: impl Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let mut out = IndexMap::with_capacity(self.len());
        for (name, p) in &self.tensors {
            let g = grads.req(name)?;
            out.insert(name.clone(), f(p, g)?);
        }
        Ok(Self { role: self.role, tensors: out })
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { role: self.role, tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// All elements concatenated in insertion order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Detached set with this set's names and shapes, filled from `flat`.
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(TensorError::InvalidArgument {
                op: "ParamSet::unflatten",
                msg: format!("expected {} values, got {}", self.numel(), flat.len()),
            });
        }
        let mut offset = 0;
        let mut out = IndexMap::with_capacity(self.len());
        for (name, t) in &self.tensors {
            let n = t.numel();
            out.insert(name.clone(), Tensor::from_vec(t.shape(), flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(Self { role: self.role, tensors: out })
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

/// Gradient per parameter name; shapes match the parameters.
#[derive(Clone, Debug)]
pub struct GradMap<T: Scalar = f32> {
    grads: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for GradMap<T> {
    fn default() -> Self {
        Self { grads: IndexMap::new() }
    }
}

impl<T: Scalar> GradMap<T> {
    pub fn from_pairs(pairs: Vec<(String, Tensor<T>)>) -> Self {
        Self { grads: pairs.into_iter().collect() }
    }

    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self { grads: params.iter().map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape()))).collect() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn req(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| TensorError::InvalidArgument {
            op: "GradMap::req",
            msg: format!("no gradient for {name}"),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor<T>) {
        self.grads.insert(name.into(), g);
    }

    pub fn extend(&mut self, other: GradMap<T>) {
        self.grads.extend(other.grads);
    }

    /// Detached elementwise sum; names missing from `self` are taken from `other`.
    pub fn accumulate(&mut self, other: &GradMap<T>) -> Result<()> {
        for (name, g) in other.iter() {
            let sum = match self.grads.get(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(TensorError::ShapeMismatch {
                            op: "GradMap::accumulate",
                            lhs: acc.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    let data = acc.data().iter().zip(g.data()).map(|(&a, &b)| a + b).collect();
                    Tensor::from_vec(acc.shape(), data)?
                }
                None => g.detach(),
            };
            self.grads.insert(name.to_string(), sum);
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<T> {
        self.grads.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn l2_norm(&self) -> T {
        self.grads.values().map(|t| t.data().iter().map(|&v| v * v).sum::<T>()).sum::<T>().sqrt()
    }
}
