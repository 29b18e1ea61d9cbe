//! Dense tensors with taped reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted n-dimensional array. When
//! it is attached to a [`Tape`], every operation applied to it is recorded
//! so that [`backward`] can later produce gradients. Gradients may
//! themselves be recorded (`create_graph`), which is what exact
//! second-order MAML needs: the inner-loop gradient becomes part of the
//! graph that the outer loop differentiates.
//!
//! Only one level of nesting is supported. A subgraph built while a
//! `create_graph` backward was running can be differentiated again, but
//! not with `create_graph` set.

mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod params;
mod primitive;
mod tape;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};
use std::sync::Arc;

use num_traits::Float;

pub use gradcheck::finite_diff_grad;
pub use ops::ConvGeom;
pub use params::{GradMap, ParamRole, ParamSet};
pub use primitive::{apply_primitive, PrimitiveAttrs, PrimitiveKind};
pub use tape::{backward, grad, Tape};

pub(crate) use tape::NodeRef;

/// Element type of a tensor: `f32` for training, `f64` for oracle checks.
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    const NAME: &'static str;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_usize(v: usize) -> Self {
        Self::of_f64(v as f64)
    }

    /// `c ← a·b + β·c` for an `m×k` by `k×n` product. Each matrix is given
    /// as a slice plus (row stride, column stride) in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: Strides, b: &[Self], sb: Strides, beta: Self, c: &mut [Self], sc: Strides);
}

/// Row and column strides of a matrix view, in elements.
pub type Strides = (usize, usize);

fn check_view(len: usize, rows: usize, cols: usize, (rs, cs): Strides) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "matrix view exceeds its buffer");
    }
}

/// Plain triple loop for shapes too small or thin to be worth packing.
#[allow(clippy::too_many_arguments)]
fn naive_gemm<T: Float + AddAssign>(m: usize, k: usize, n: usize, a: &[T], sa: Strides, b: &[T], sb: Strides, beta: T, c: &mut [T], sc: Strides) {
    for i in 0..m {
        for j in 0..n {
            let o = &mut c[i * sc.0 + j * sc.1];
            *o = if beta == T::zero() { T::zero() } else { *o * beta };
        }
        for p in 0..k {
            let x = a[i * sa.0 + p * sa.1];
            for j in 0..n {
                c[i * sc.0 + j * sc.1] += x * b[p * sb.0 + j * sb.1];
            }
        }
    }
}

macro_rules! impl_gemm {
    ($kernel:path) => {
        fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: Strides, b: &[Self], sb: Strides, beta: Self, c: &mut [Self], sc: Strides) {
            check_view(a.len(), m, k, sa);
            check_view(b.len(), k, n, sb);
            check_view(c.len(), m, n, sc);
            if m < 4 || k < 4 || m * k * n < 4096 {
                return naive_gemm(m, k, n, a, sa, b, sb, beta, c, sc);
            }
            let s = |v: usize| v as isize;
            // SAFETY: every view was checked to lie inside its slice, and `c`
            // is borrowed mutably so it cannot alias `a` or `b`.
            unsafe {
                $kernel(m, k, n, 1.0, a.as_ptr(), s(sa.0), s(sa.1), b.as_ptr(), s(sb.0), s(sb.1), beta, c.as_mut_ptr(), s(sc.0), s(sc.1));
            }
        }
    };
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    impl_gemm!(matrixmultiply::sgemm);
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    impl_gemm!(matrixmultiply::dgemm);
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor is not recorded on a tape")]
    NotOnTape,
    #[error("operands live on different tapes")]
    TapeMismatch,
    #[error("create_graph requested through a graph that was itself built by create_graph (only one nesting level is supported)")]
    NestingExceeded,
    #[error("function evaluation returned a non-finite value")]
    NonFiniteEvaluation,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// N-dimensional array, optionally recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor<T: Scalar = f32> {
    shape: Arc<[usize]>,
    data: Arc<Vec<T>>,
    node: Option<NodeRef<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "from_vec",
                msg: format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self::from_parts(shape.into(), Arc::new(data), None))
    }

    pub(crate) fn from_parts(shape: Arc<[usize]>, data: Arc<Vec<T>>, node: Option<NodeRef<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, node }
    }

    pub fn from_f64s(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::of_f64(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(Arc::from(&[][..]), Arc::new(vec![v]), None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.into(), Arc::new(vec![v; n]), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut d = vec![T::zero(); n * n];
        for i in 0..n {
            d[i * n + i] = T::one();
        }
        Self::from_parts(Arc::from(&[n, n][..]), Arc::new(d), None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Same values, no tape.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone(), None)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|v| U::of_f64(v.as_f64())).collect();
        Tensor::from_parts(self.shape.clone(), Arc::new(data), None)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::from_parts(self.shape.clone(), Arc::new(data), None)
    }

    /// Copy of rows `[start, start + len)` along the leading axis.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let rows = *self.shape.first().ok_or(TensorError::InvalidArgument {
            op: "slice_rows",
            msg: "rank-0 tensor".into(),
        })?;
        if start + len > rows {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {rows}", start + len),
            });
        }
        let stride = self.numel() / rows.max(1);
        let mut shape = self.shape.to_vec();
        shape[0] = len;
        Self::from_vec(&shape, self.data[start * stride..(start + len) * stride].to_vec())
    }

    /// Detached tensor whose rows are `self[idx[0]], self[idx[1]], ...`.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let rows = self.shape.first().copied().unwrap_or(0);
        let stride = if rows == 0 { 0 } else { self.numel() / rows };
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::InvalidArgument {
                    op: "select_rows",
                    msg: format!("row {i} out of {rows}"),
                });
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.to_vec();
        shape[0] = idx.len();
        Self::from_vec(&shape, data)
    }

    /// Index of the largest element of each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = *self.shape.last().unwrap_or(&1);
        self.data
            .chunks(cols.max(1))
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and elements.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape).field("node", &self.node_id());
        if self.numel() <= 16 {
            s.field("data", &self.data);
        }
        s.finish()
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
