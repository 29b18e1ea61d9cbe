//! Raw numeric kernels over contiguous row-major buffers. Products go
//! through a blocked GEMM.

use super::Scalar;

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_into(&mut out, a, b, m, k, n);
    out
}

fn matmul_into<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    T::gemm(m, k, n, a, (k, 1), b, (n, 1), T::zero(), out, (n, 1));
}

/// `a (m×k) · bᵀ` where `b` is stored `n×k`; accumulates into `out`.
fn matmul_nt_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    T::gemm(m, k, n, a, (k, 1), b, (1, k), T::one(), out, (n, 1));
}

/// `aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
fn matmul_tn_into<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    T::gemm(m, k, n, a, (1, m), b, (n, 1), T::zero(), out, (n, 1));
}

pub(crate) fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Shapes of one 2-D convolution: input `(c_in, h, w)`, kernel
/// `(c_out, c_in, kh, kw)`, output `(c_out, ho, wo)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    fn ckk(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let hw_out = d.hw_out();
    for c in 0..d.c_in {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let r = (c * d.kh + ki) * d.kw + kj;
                let row = &mut cols[r * hw_out..(r + 1) * hw_out];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        *v = if ix < 0 || ix >= d.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], d: &ConvDims, x: &mut [T]) {
    let hw_out = d.hw_out();
    for c in 0..d.c_in {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let r = (c * d.kh + ki) * d.kw + kj;
                let row = &cols[r * hw_out..(r + 1) * hw_out];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            dst[ix as usize] += row[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d<T: Scalar>(x: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let (in_sz, out_sz) = (d.c_in * d.h * d.w, d.c_out * d.hw_out());
    let mut out = vec![T::zero(); d.batch * out_sz];
    let mut cols = vec![T::zero(); d.ckk() * d.hw_out()];
    for b in 0..d.batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], d, &mut cols);
        matmul_into(&mut out[b * out_sz..(b + 1) * out_sz], w, &cols, d.c_out, d.ckk(), d.hw_out());
    }
    out
}

/// Adjoint of [`conv2d`] in its input: maps an output-shaped `g` back to input shape.
pub(crate) fn conv2d_input_grad<T: Scalar>(g: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let (in_sz, out_sz) = (d.c_in * d.h * d.w, d.c_out * d.hw_out());
    let mut dx = vec![T::zero(); d.batch * in_sz];
    let mut cols = vec![T::zero(); d.ckk() * d.hw_out()];
    for b in 0..d.batch {
        matmul_tn_into(&mut cols, w, &g[b * out_sz..(b + 1) * out_sz], d.ckk(), d.c_out, d.hw_out());
        col2im_add(&cols, d, &mut dx[b * in_sz..(b + 1) * in_sz]);
    }
    dx
}

/// Adjoint of [`conv2d`] in its kernel.
pub(crate) fn conv2d_weight_grad<T: Scalar>(x: &[T], g: &[T], d: &ConvDims) -> Vec<T> {
    let (in_sz, out_sz) = (d.c_in * d.h * d.w, d.c_out * d.hw_out());
    let mut dw = vec![T::zero(); d.c_out * d.ckk()];
    let mut cols = vec![T::zero(); d.ckk() * d.hw_out()];
    for b in 0..d.batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], d, &mut cols);
        matmul_nt_acc(&mut dw, &g[b * out_sz..(b + 1) * out_sz], &cols, d.c_out, d.hw_out(), d.ckk());
    }
    dw
}

/// Flat input index of the maximum of every 2×2 window (floor mode).
/// Ties resolve to the lowest flat index.
pub(crate) fn maxpool2x2_indices<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<usize> {
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}
