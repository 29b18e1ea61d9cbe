//! Recorded operations and their vector-Jacobian products.
//!
//! Every VJP is written in terms of the same recorded operations, so when a
//! backward pass runs with recording enabled the gradient is itself a graph.
//! The op set is closed under taking adjoints: convolution pairs with its
//! two adjoints, gather with scatter, reductions with broadcasts, column
//! slices with column padding.

use std::sync::Arc;

use super::kernels::{self, ConvDims};
use super::{Result, Scalar, Tape, Tensor, TensorError};

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self { stride: 1, pad: 1 }
    }
}

#[derive(Clone)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Matmul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(T),
    AddScalar(T),
    Pow(T),
    /// Multiplication by a constant 0/1 mask; relu records as this.
    MaskMul(Arc<Vec<T>>),
    /// View the input as `[outer, mid, inner]` and sum over `outer` and `inner`.
    SumToMid { outer: usize, inner: usize },
    /// Adjoint of `SumToMid`.
    BroadcastMid { outer: usize, inner: usize },
    /// `x·s + t` with `s` and `t` spread along the mid axis of `[outer, mid, inner]`.
    ScaleShiftMid { outer: usize, inner: usize },
    Reshape,
    SliceCols { start: usize },
    PadCols { start: usize },
    Concat,
    Conv(ConvGeom),
    ConvInputGrad(ConvGeom),
    ConvWeightGrad(ConvGeom),
    Gather(Arc<Vec<usize>>),
    Scatter(Arc<Vec<usize>>),
    Softmax,
    SoftmaxXent(Arc<Vec<usize>>),
}

fn common_tape<'a, T: Scalar>(inputs: &[&'a Tensor<T>]) -> Result<Option<&'a Tape<T>>> {
    let mut found: Option<&Tape<T>> = None;
    for t in inputs {
        if let Some(tape) = t.tape() {
            match found {
                Some(f) if !f.ptr_eq(tape) => return Err(TensorError::TapeMismatch),
                _ => found = Some(tape),
            }
        }
    }
    Ok(found)
}

fn finish<T: Scalar>(
    name: &'static str,
    op: Op<T>,
    inputs: &[&Tensor<T>],
    shape: &[usize],
    data: Vec<T>,
) -> Result<Tensor<T>> {
    if !data.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op: name });
    }
    finish_shared(op, inputs, shape, Arc::new(data))
}

fn finish_shared<T: Scalar>(op: Op<T>, inputs: &[&Tensor<T>], shape: &[usize], data: Arc<Vec<T>>) -> Result<Tensor<T>> {
    let shape: Arc<[usize]> = shape.into();
    match common_tape(inputs)? {
        Some(tape) if tape.is_recording() => Ok(tape.record(op, inputs, shape, data)),
        _ => Ok(Tensor::from_parts(shape, data, None)),
    }
}

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, msg: msg.into() }
}

fn zip_with<T: Scalar>(
    name: &'static str,
    op: Op<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(mismatch(name, a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    finish(name, op, &[a, b], a.shape(), data)
}

impl<T: Scalar> Tensor<T> {
    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape() {
            [r, c] => Ok((r, c)),
            _ => Err(invalid(op, format!("expected a matrix, got shape {:?}", self.shape()))),
        }
    }

    fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape() {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(invalid(op, format!("expected (batch, channels, height, width), got {:?}", self.shape()))),
        }
    }

    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self, rhs));
        }
        let out = kernels::matmul(self.data(), rhs.data(), m, k, n);
        finish("matmul", Op::Matmul, &[self, rhs], &[m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2("transpose")?;
        let out = kernels::transpose(self.data(), m, n);
        finish("transpose", Op::Transpose, &[self], &[n, m], out)
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        zip_with("add", Op::Add, self, rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        zip_with("sub", Op::Sub, self, rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        zip_with("mul", Op::Mul, self, rhs, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&v| v * c).collect();
        finish("scale", Op::Scale(c), &[self], self.shape(), data)
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&v| v + c).collect();
        finish("add_scalar", Op::AddScalar(c), &[self], self.shape(), data)
    }

    pub fn pow(&self, p: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&v| v.powf(p)).collect();
        finish("pow", Op::Pow(p), &[self], self.shape(), data)
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&self, mask: Arc<Vec<T>>) -> Result<Tensor<T>> {
        if mask.len() != self.numel() {
            return Err(invalid("mask_mul", format!("mask of {} for {} elements", mask.len(), self.numel())));
        }
        let data = self.data().iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
        finish("mask_mul", Op::MaskMul(mask), &[self], self.shape(), data)
    }

    /// `max(x, 0)`; the derivative at 0 is taken to be 0.
    pub fn relu(&self) -> Result<Tensor<T>> {
        let mask: Vec<T> = self
            .data()
            .iter()
            .map(|&v| if v > T::zero() { T::one() } else { T::zero() })
            .collect();
        self.mask_mul(Arc::new(mask))
    }

    /// Views `self` as `[outer, mid, inner]` and sums over the outer and
    /// inner axes, giving a tensor of shape `out_shape` with `mid` elements.
    pub fn sum_to_mid(&self, outer: usize, inner: usize, out_shape: &[usize]) -> Result<Tensor<T>> {
        let mid: usize = out_shape.iter().product();
        if outer * mid * inner != self.numel() {
            return Err(invalid(
                "sum_to_mid",
                format!("{:?} is not [{outer}, {mid}, {inner}]", self.shape()),
            ));
        }
        let mut out = vec![T::zero(); mid];
        let data = self.data();
        for o in 0..outer {
            let block = &data[o * mid * inner..(o + 1) * mid * inner];
            for (m, acc) in out.iter_mut().enumerate() {
                *acc += block[m * inner..(m + 1) * inner].iter().copied().sum::<T>();
            }
        }
        finish("sum_to_mid", Op::SumToMid { outer, inner }, &[self], out_shape, out)
    }

    /// Repeats `self` (with `mid` elements) into `[outer, mid, inner]`,
    /// reshaped to `out_shape`.
    pub fn broadcast_mid(&self, outer: usize, inner: usize, out_shape: &[usize]) -> Result<Tensor<T>> {
        let mid = self.numel();
        if outer * mid * inner != out_shape.iter().product::<usize>() {
            return Err(invalid(
                "broadcast_mid",
                format!("cannot spread {:?} over {out_shape:?} as [{outer}, {mid}, {inner}]", self.shape()),
            ));
        }
        let mut out = Vec::with_capacity(outer * mid * inner);
        for _ in 0..outer {
            for &v in self.data() {
                out.extend(std::iter::repeat_n(v, inner));
            }
        }
        finish("broadcast_mid", Op::BroadcastMid { outer, inner }, &[self], out_shape, out)
    }

    /// Views `self` as `[outer, mid, inner]` and computes `x·s[m] + t[m]`.
    pub fn scale_shift_mid(&self, s: &Tensor<T>, t: &Tensor<T>, outer: usize, inner: usize) -> Result<Tensor<T>> {
        let mid = s.numel();
        if t.numel() != mid {
            return Err(mismatch("scale_shift_mid", s, t));
        }
        if outer * mid * inner != self.numel() {
            return Err(invalid("scale_shift_mid", format!("{:?} is not [{outer}, {mid}, {inner}]", self.shape())));
        }
        let mut out = Vec::with_capacity(self.numel());
        for block in self.data().chunks_exact(inner.max(1)).take(outer * mid) {
            let m = out.len() / inner % mid;
            let (a, b) = (s.data()[m], t.data()[m]);
            out.extend(block.iter().map(|&v| v * a + b));
        }
        finish("scale_shift_mid", Op::ScaleShiftMid { outer, inner }, &[self, s, t], self.shape(), out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: self.shape().to_vec(), rhs: shape.to_vec() });
        }
        finish_shared(Op::Reshape, &[self], shape, self.data.clone())
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (r, c) = self.dims2("slice_cols")?;
        if start + len > c {
            return Err(invalid("slice_cols", format!("columns {start}..{} of {c}", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in self.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        finish("slice_cols", Op::SliceCols { start }, &[self], &[r, len], out)
    }

    /// Places the columns of `self` at `start` inside a zero matrix with `total` columns.
    pub fn pad_cols(&self, start: usize, total: usize) -> Result<Tensor<T>> {
        let (r, c) = self.dims2("pad_cols")?;
        if start + c > total {
            return Err(invalid("pad_cols", format!("{c} columns at {start} exceed {total}")));
        }
        let mut out = vec![T::zero(); r * total];
        for (i, row) in self.data().chunks(c.max(1)).enumerate().take(r) {
            out[i * total + start..i * total + start + c].copy_from_slice(row);
        }
        finish("pad_cols", Op::PadCols { start }, &[self], &[r, total], out)
    }

    /// Concatenation of two matrices along the last axis.
    pub fn concat_cols(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (r1, c1) = self.dims2("concat_last_axis")?;
        let (r2, c2) = rhs.dims2("concat_last_axis")?;
        if r1 != r2 {
            return Err(mismatch("concat_last_axis", self, rhs));
        }
        let mut out = Vec::with_capacity(r1 * (c1 + c2));
        for i in 0..r1 {
            out.extend_from_slice(&self.data()[i * c1..(i + 1) * c1]);
            out.extend_from_slice(&rhs.data()[i * c2..(i + 1) * c2]);
        }
        finish("concat_last_axis", Op::Concat, &[self, rhs], &[r1, c1 + c2], out)
    }

    fn conv_dims(x: [usize; 4], kernel: [usize; 4], geom: ConvGeom, op: &'static str) -> Result<ConvDims> {
        let [batch, c_in, h, w] = x;
        let [c_out, kc, kh, kw] = kernel;
        if kc != c_in {
            return Err(TensorError::ShapeMismatch { op, lhs: x.to_vec(), rhs: kernel.to_vec() });
        }
        if geom.stride == 0 || h + 2 * geom.pad < kh || w + 2 * geom.pad < kw {
            return Err(invalid(op, format!("kernel {kh}x{kw} does not fit {h}x{w} with padding {}", geom.pad)));
        }
        let ho = (h + 2 * geom.pad - kh) / geom.stride + 1;
        let wo = (w + 2 * geom.pad - kw) / geom.stride + 1;
        Ok(ConvDims { batch, c_in, h, w, c_out, kh, kw, stride: geom.stride, pad: geom.pad, ho, wo })
    }

    /// Cross-correlation of `(B, C_in, H, W)` with a `(C_out, C_in, kh, kw)` kernel.
    pub fn conv2d(&self, kernel: &Tensor<T>, geom: ConvGeom) -> Result<Tensor<T>> {
        let d = Self::conv_dims(self.dims4("conv2d")?, kernel.dims4("conv2d")?, geom, "conv2d")?;
        let out = kernels::conv2d(self.data(), kernel.data(), &d);
        finish("conv2d", Op::Conv(geom), &[self, kernel], &[d.batch, d.c_out, d.ho, d.wo], out)
    }

    /// Adjoint of [`conv2d`](Self::conv2d) in its input, for an input of spatial size `in_hw`.
    pub fn conv2d_input_grad(&self, kernel: &Tensor<T>, geom: ConvGeom, in_hw: (usize, usize)) -> Result<Tensor<T>> {
        let [batch, c_out, ho, wo] = self.dims4("conv2d_input_grad")?;
        let k = kernel.dims4("conv2d_input_grad")?;
        let d = Self::conv_dims([batch, k[1], in_hw.0, in_hw.1], k, geom, "conv2d_input_grad")?;
        if d.c_out != c_out || d.ho != ho || d.wo != wo {
            return Err(mismatch("conv2d_input_grad", self, kernel));
        }
        let out = kernels::conv2d_input_grad(self.data(), kernel.data(), &d);
        let op = Op::ConvInputGrad(geom);
        finish("conv2d_input_grad", op, &[self, kernel], &[batch, d.c_in, d.h, d.w], out)
    }

    /// Adjoint of [`conv2d`](Self::conv2d) in its kernel: `self` is the input, `g` the output gradient.
    pub fn conv2d_weight_grad(&self, g: &Tensor<T>, geom: ConvGeom, kernel: (usize, usize)) -> Result<Tensor<T>> {
        let x = self.dims4("conv2d_weight_grad")?;
        let [gb, c_out, ho, wo] = g.dims4("conv2d_weight_grad")?;
        let d = Self::conv_dims(x, [c_out, x[1], kernel.0, kernel.1], geom, "conv2d_weight_grad")?;
        if gb != x[0] || d.ho != ho || d.wo != wo {
            return Err(mismatch("conv2d_weight_grad", self, g));
        }
        let out = kernels::conv2d_weight_grad(self.data(), g.data(), &d);
        let op = Op::ConvWeightGrad(geom);
        finish("conv2d_weight_grad", op, &[self, g], &[c_out, d.c_in, d.kh, d.kw], out)
    }

    /// `out[i] = self.flat[idx[i]]`, shaped `out_shape`.
    pub fn gather(&self, idx: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor<T>> {
        if idx.len() != out_shape.iter().product::<usize>() || idx.iter().any(|&i| i >= self.numel()) {
            return Err(invalid("gather", "index set does not fit"));
        }
        let out = idx.iter().map(|&i| self.data()[i]).collect();
        finish("gather", Op::Gather(idx), &[self], out_shape, out)
    }

    /// Adjoint of [`gather`](Self::gather): `out.flat[idx[i]] += self[i]` into zeros of `out_shape`.
    pub fn scatter(&self, idx: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = out_shape.iter().product();
        if idx.len() != self.numel() || idx.iter().any(|&i| i >= n) {
            return Err(invalid("scatter", "index set does not fit"));
        }
        let mut out = vec![T::zero(); n];
        for (&i, &v) in idx.iter().zip(self.data()) {
            out[i] += v;
        }
        finish("scatter", Op::Scatter(idx), &[self], out_shape, out)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let (_, c) = self.dims2("softmax")?;
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks(c.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - m).exp()));
            let z: T = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v = *v / z);
        }
        finish("softmax", Op::Softmax, &[self], self.shape(), out)
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn softmax_xent(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let (r, c) = self.dims2("softmax_xent")?;
        if labels.len() != r || r == 0 {
            return Err(invalid("softmax_xent", format!("{} labels for {r} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(invalid("softmax_xent", format!("label {bad} out of {c} classes")));
        }
        let mut total = T::zero();
        for (row, &l) in self.data().chunks(c).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - row[l];
        }
        let loss = total / T::of_usize(r);
        finish("softmax_xent", Op::SoftmaxXent(Arc::new(labels.to_vec())), &[self], &[], vec![loss])
    }

    // Composites.

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.scale(-T::one())
    }

    /// Adds a length-`n` vector to every row of a `(rows, n)` matrix.
    pub fn add_row_vector(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, c) = self.dims2("add_row_vector")?;
        if v.numel() != c {
            return Err(mismatch("add_row_vector", self, v));
        }
        self.add(&v.broadcast_mid(r, 1, &[r, c])?)
    }

    /// Column sums of a matrix.
    pub fn sum_rows(&self) -> Result<Tensor<T>> {
        let (r, c) = self.dims2("sum_rows")?;
        self.sum_to_mid(r, 1, &[c])
    }

    /// Column means of a matrix.
    pub fn mean_rows(&self) -> Result<Tensor<T>> {
        let (r, _) = self.dims2("mean_rows")?;
        if r == 0 {
            return Err(invalid("mean_rows", "no rows"));
        }
        self.sum_rows()?.scale(T::one() / T::of_usize(r))
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn maxpool2x2(&self) -> Result<Tensor<T>> {
        let [b, c, h, w] = self.dims4("maxpool2x2")?;
        if h < 2 || w < 2 {
            return Err(invalid("maxpool2x2", format!("{h}x{w} map is too small to pool")));
        }
        let idx = kernels::maxpool2x2_indices(self.data(), b * c, h, w);
        self.gather(Arc::new(idx), &[b, c, h / 2, w / 2])
    }

    /// Mean over the spatial axes: `(B, C, H, W) -> (B, C)`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let [b, c, h, w] = self.dims4("global_avg_pool")?;
        self.sum_to_mid(1, h * w, &[b, c])?.scale(T::one() / T::of_usize(h * w))
    }

    /// Batch normalization with current-batch statistics over every axis
    /// but the channel axis (axis 1).
    pub fn batch_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 {
            return Err(invalid("batch_norm", format!("expected (batch, channels, ...), got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        if b < 2 {
            return Err(invalid("batch_norm", format!("batch of {b} is too small for batch statistics")));
        }
        if gamma.numel() != c || beta.numel() != c {
            return Err(mismatch("batch_norm", self, gamma));
        }
        let inner: usize = shape[2..].iter().product();
        let inv_n = T::one() / T::of_usize(b * inner);
        let sum = |t: &Tensor<T>| t.sum_to_mid(b, inner, &[c]);
        let mean = sum(self)?.scale(inv_n)?;
        let centered = self.scale_shift_mid(&Tensor::ones(&[c]), &mean.neg()?, b, inner)?;
        let var = sum(&centered.mul(&centered)?)?.scale(inv_n)?;
        let inv_std = var.add_scalar(eps)?.pow(T::of_f64(-0.5))?;
        centered.scale_shift_mid(&gamma.reshape(&[c])?.mul(&inv_std)?, &beta.reshape(&[c])?, b, inner)
    }
}

pub(crate) fn vjp<T: Scalar>(
    op: &Op<T>,
    x: &[Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let mut r: Vec<Option<Tensor<T>>> = vec![None; x.len()];
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf => {}
        Op::Matmul => {
            if need(0) {
                r[0] = Some(g.matmul(&x[1].transpose()?)?);
            }
            if need(1) {
                r[1] = Some(x[0].transpose()?.matmul(g)?);
            }
        }
        Op::Transpose => r[0] = Some(g.transpose()?),
        Op::Add => {
            r[0] = Some(g.clone());
            r[1] = Some(g.clone());
        }
        Op::Sub => {
            r[0] = Some(g.clone());
            if need(1) {
                r[1] = Some(g.neg()?);
            }
        }
        Op::Mul => {
            if need(0) {
                r[0] = Some(g.mul(&x[1])?);
            }
            if need(1) {
                r[1] = Some(g.mul(&x[0])?);
            }
        }
        Op::Scale(c) => r[0] = Some(g.scale(*c)?),
        Op::AddScalar(_) => r[0] = Some(g.clone()),
        Op::Pow(p) => {
            let slope = x[0].pow(*p - T::one())?.scale(*p)?;
            r[0] = Some(g.mul(&slope)?);
        }
        Op::MaskMul(mask) => r[0] = Some(g.mask_mul(mask.clone())?),
        Op::SumToMid { outer, inner } => r[0] = Some(g.broadcast_mid(*outer, *inner, x[0].shape())?),
        Op::BroadcastMid { outer, inner } => r[0] = Some(g.sum_to_mid(*outer, *inner, x[0].shape())?),
        Op::ScaleShiftMid { outer, inner } => {
            let mid = x[1].numel();
            if need(0) {
                r[0] = Some(g.scale_shift_mid(&x[1], &Tensor::zeros(x[1].shape()), *outer, *inner)?);
            }
            if need(1) {
                r[1] = Some(g.mul(&x[0])?.sum_to_mid(*outer, *inner, &[mid])?.reshape(x[1].shape())?);
            }
            if need(2) {
                r[2] = Some(g.sum_to_mid(*outer, *inner, &[mid])?.reshape(x[2].shape())?);
            }
        }
        Op::Reshape => r[0] = Some(g.reshape(x[0].shape())?),
        Op::SliceCols { start } => {
            let total = x[0].shape()[1];
            r[0] = Some(g.pad_cols(*start, total)?);
        }
        Op::PadCols { start } => {
            let len = x[0].shape()[1];
            r[0] = Some(g.slice_cols(*start, len)?);
        }
        Op::Concat => {
            let c1 = x[0].shape()[1];
            let c2 = x[1].shape()[1];
            if need(0) {
                r[0] = Some(g.slice_cols(0, c1)?);
            }
            if need(1) {
                r[1] = Some(g.slice_cols(c1, c2)?);
            }
        }
        Op::Conv(geom) => {
            let s = x[0].shape();
            let k = x[1].shape();
            if need(0) {
                r[0] = Some(g.conv2d_input_grad(&x[1], *geom, (s[2], s[3]))?);
            }
            if need(1) {
                r[1] = Some(x[0].conv2d_weight_grad(g, *geom, (k[2], k[3]))?);
            }
        }
        Op::ConvInputGrad(geom) => {
            // out = A(g, w) with <A(g, w), u> = <g, conv(u, w)>.
            let k = x[1].shape();
            if need(0) {
                r[0] = Some(g.conv2d(&x[1], *geom)?);
            }
            if need(1) {
                r[1] = Some(g.conv2d_weight_grad(&x[0], *geom, (k[2], k[3]))?);
            }
        }
        Op::ConvWeightGrad(geom) => {
            // out = B(x, g) with <B(x, g), v> = <g, conv(x, v)>.
            let s = x[0].shape();
            if need(0) {
                r[0] = Some(x[1].conv2d_input_grad(g, *geom, (s[2], s[3]))?);
            }
            if need(1) {
                r[1] = Some(x[0].conv2d(g, *geom)?);
            }
        }
        Op::Gather(idx) => r[0] = Some(g.scatter(idx.clone(), x[0].shape())?),
        Op::Scatter(idx) => r[0] = Some(g.gather(idx.clone(), x[0].shape())?),
        Op::Softmax => {
            let (rows, cols) = out.dims2("softmax")?;
            let weighted = g.mul(out)?.sum_to_mid(1, cols, &[rows])?;
            let centered = g.sub(&weighted.broadcast_mid(1, cols, &[rows, cols])?)?;
            r[0] = Some(out.mul(&centered)?);
        }
        Op::SoftmaxXent(labels) => {
            let (rows, cols) = x[0].dims2("softmax_xent")?;
            let mut onehot = vec![T::zero(); rows * cols];
            for (i, &l) in labels.iter().enumerate() {
                onehot[i * cols + l] = T::one();
            }
            let onehot = Tensor::from_vec(&[rows, cols], onehot)?;
            let diff = x[0].softmax_rows()?.sub(&onehot)?;
            let upstream = g.broadcast_mid(1, rows * cols, &[rows, cols])?;
            r[0] = Some(diff.mul(&upstream)?.scale(T::one() / T::of_usize(rows))?);
        }
    }
    Ok(r)
}
