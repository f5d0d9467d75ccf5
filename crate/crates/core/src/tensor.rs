//! Dense row-major tensors and the raw numeric kernels behind the
//! differentiable ops.
//!
//! Kernels here are plain functions over slices; the tape in
//! [`crate::autodiff`] composes them into forward and adjoint passes.
//! Every reduction runs in a fixed sequential order so results are
//! bitwise reproducible.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type usable by the engine: `f32` for training, `f64` for oracles
/// and gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn lit(x: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Row-major matrix from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("elementwise", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| !v.is_zero()).count()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (m, n) = dims2(self, "transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", &self.shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.numel() {
            let mut off = 0;
            for (d, &a) in axes.iter().enumerate() {
                off += idx[d] * in_strides[a];
            }
            out.push(self.data[off]);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Elements per index of the leading axis.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Entries `start..end` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if self.rank() < 2 || start >= end || end > self.shape[0] {
            return Err(Error::shape("slice_rows", &self.shape, &[start, end]));
        }
        let n = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * n..end * n].to_vec(),
        })
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        if first.rank() < 2 {
            return Err(Error::shape("concat_rows", first.shape(), &[0, 0]));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != first.rank() || p.shape[1..] != first.shape[1..] {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }
}

pub(crate) fn dims2<T>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        &[m, n] => Ok((m, n)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av.is_zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is m×k and `g` is m×n.
pub(crate) fn matmul_at_b<T: Real>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av.is_zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m×k] += g · bᵀ` where `g` is m×n and `b` is k×n.
pub(crate) fn matmul_a_bt<T: Real>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[b, c_in, h, wd], &[c_out, c_in_w, kh, kw]) = (x, w) else {
            return Err(Error::shape("conv2d", x, w));
        };
        if c_in != c_in_w {
            return Err(Error::shape("conv2d", x, w));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let span_h = h + 2 * padding;
        let span_w = wd + 2 * padding;
        if span_h < kh || span_w < kw || !(span_h - kh).is_multiple_of(stride) || !(span_w - kw).is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "conv2d output extent is not an integer for input {h}x{wd}, kernel {kh}, stride {stride}, padding {padding}"
            )));
        }
        Ok(Self {
            batch: b,
            c_in,
            c_out,
            h,
            w: wd,
            kernel: kh,
            stride,
            padding,
            h_out: (span_h - kh) / stride + 1,
            w_out: (span_w - kw) / stride + 1,
        })
    }

    /// Per-image operation count `k²·h_out·w_out·c_in·c_out`.
    pub fn flops(&self) -> u64 {
        (self.kernel * self.kernel * self.h_out * self.w_out * self.c_in * self.c_out) as u64
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let k = g.kernel;
    let hw_out = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * g.w_out + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let k = g.kernel;
    let hw_out = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip).
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    let mut out = vec![T::zero(); g.batch * out_sz];
    for b in 0..g.batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        matmul_into(w, &cols, &mut out[b * out_sz..(b + 1) * out_sz], g.c_out, g.col_rows(), g.col_cols());
    }
    out
}

/// Returns `(dx, dw)`; `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward<T: Real>(x: &[T], w: &[T], gy: &[T], g: &ConvGeometry, need_dx: bool, need_dw: bool) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.col_cols();
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dcols = vec![T::zero(); rows * ncols];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    for b in 0..g.batch {
        let gyb = &gy[b * out_sz..(b + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
            matmul_a_bt(gyb, &cols, dw, g.c_out, rows, ncols);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.iter_mut().for_each(|v| *v = T::zero());
            matmul_at_b(w, gyb, &mut dcols, g.c_out, rows, ncols);
            col2im(&dcols, g, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (dx, dw)
}

/// Depthwise convolution with same padding and stride 1; `w` is `C×1×k×k`.
pub fn depthwise_forward<T: Real>(x: &[T], w: &[T], b: usize, c: usize, h: usize, wd: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * wd;
            let filt = &w[ci * k * k..(ci + 1) * k * k];
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx as isize + kx as isize - pad;
                            if ix < 0 || ix as usize >= wd {
                                continue;
                            }
                            acc += filt[ky * k + kx] * x[base + iy as usize * wd + ix as usize];
                        }
                    }
                    out[base + y * wd + xx] = acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward<T: Real>(x: &[T], w: &[T], gy: &[T], b: usize, c: usize, h: usize, wd: usize, k: usize) -> (Vec<T>, Vec<T>) {
    let pad = (k / 2) as isize;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * wd;
            for y in 0..h {
                for xx in 0..wd {
                    let g = gy[base + y * wd + xx];
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx as isize + kx as isize - pad;
                            if ix < 0 || ix as usize >= wd {
                                continue;
                            }
                            let xi = base + iy as usize * wd + ix as usize;
                            dw[ci * k * k + ky * k + kx] += g * x[xi];
                            dx[xi] += g * w[ci * k * k + ky * k + kx];
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Row-wise softmax of an `n×m` buffer with max shift.
pub fn softmax_rows<T: Real>(x: &[T], n: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for j in 0..m {
            let e = (row[j] - mx).exp();
            out[i * m + j] = e;
            z += e;
        }
        for j in 0..m {
            out[i * m + j] = out[i * m + j] / z;
        }
    }
    out
}
