//! Dense row-major tensors over f32 (training) or f64 (verification oracles),
//! plus the small matmul kernels everything else is built from.

use crate::error::{Error, Result};
use rayon::prelude::*;
use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type for tensors. Implemented for f32 and f64 only.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + PartialEq
    + Debug
    + Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;
}

macro_rules! impl_scalar_common {
    () => {
        #[inline(always)]
        fn ln(self) -> Self {
            self.ln()
        }
        #[inline(always)]
        fn sqrt(self) -> Self {
            self.sqrt()
        }
        #[inline(always)]
        fn abs(self) -> Self {
            self.abs()
        }
        #[inline(always)]
        fn mul_add(self, a: Self, b: Self) -> Self {
            Self::mul_add(self, a, b)
        }
        #[inline(always)]
        fn maxv(self, other: Self) -> Self {
            if self > other {
                self
            } else {
                other
            }
        }
        #[inline(always)]
        fn minv(self, other: Self) -> Self {
            if self < other {
                self
            } else {
                other
            }
        }
    };
}

/// Branch-free exp for the f32 training path: 2^(x·log2 e) with the exponent
/// split into integer bits and a degree-5 polynomial for the fraction.
/// Relative error ~2e-7, exact at 0; auto-vectorizes, unlike libm expf.
#[inline(always)]
pub fn fast_exp_f32(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    let z = x * std::f32::consts::LOG2_E;
    let zf = z.floor();
    let f = z - zf;
    let p = 1.0
        + f * (0.693_147_18
            + f * (0.240_226_51
                + f * (0.055_504_11 + f * (0.009_618_13 + f * 0.001_333_55))));
    let scale = f32::from_bits((((zf as i32) + 127) << 23) as u32);
    scale * p
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn exp(self) -> Self {
        fast_exp_f32(self)
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        // (e^{2x} − 1)/(e^{2x} + 1); the backward rule 1 − tanh² is the
        // exact derivative of this expression
        let e = fast_exp_f32(2.0 * self);
        (e - 1.0) / (e + 1.0)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    impl_scalar_common!();
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    impl_scalar_common!();
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                op: "Tensor::new",
                shape,
                reason: format!("shape wants {numel} elements, data has {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::ZERO; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// Rank-1 tensor of length 1. The scalar convention used throughout.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, new shape (must preserve element count).
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::BadShape {
                op: "reshape",
                shape,
                reason: format!("element count {} != {}", numel, self.data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Euclidean norm of the flattened data, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}

const PAR_MAP_THRESHOLD: usize = 1 << 14;
const PAR_MAP_CHUNK: usize = 1 << 13;

/// Elementwise map src -> dst, parallel for large tensors. Chunked so the
/// result is bitwise identical regardless of thread count.
pub fn par_map<T: Scalar>(src: &[T], dst: &mut [T], f: impl Fn(T) -> T + Sync) {
    debug_assert_eq!(src.len(), dst.len());
    if src.len() >= PAR_MAP_THRESHOLD {
        dst.par_chunks_mut(PAR_MAP_CHUNK)
            .zip(src.par_chunks(PAR_MAP_CHUNK))
            .for_each(|(d, s)| {
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv = f(sv);
                }
            });
    } else {
        for (dv, &sv) in dst.iter_mut().zip(src) {
            *dv = f(sv);
        }
    }
}

/// Elementwise map over two sources, parallel for large tensors.
pub fn par_zip_map<T: Scalar>(a: &[T], b: &[T], dst: &mut [T], f: impl Fn(T, T) -> T + Sync) {
    debug_assert_eq!(a.len(), dst.len());
    debug_assert_eq!(b.len(), dst.len());
    if a.len() >= PAR_MAP_THRESHOLD {
        dst.par_chunks_mut(PAR_MAP_CHUNK)
            .zip(a.par_chunks(PAR_MAP_CHUNK).zip(b.par_chunks(PAR_MAP_CHUNK)))
            .for_each(|(d, (sa, sb))| {
                for ((dv, &av), &bv) in d.iter_mut().zip(sa).zip(sb) {
                    *dv = f(av, bv);
                }
            });
    } else {
        for ((dv, &av), &bv) in dst.iter_mut().zip(a).zip(b) {
            *dv = f(av, bv);
        }
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

const PAR_FLOP_THRESHOLD: usize = 1 << 16;
const MIN_CHUNK_FLOPS: usize = 1 << 15;

/// Rows per parallel chunk: large enough to amortize scheduling, small
/// enough to balance across the pool.
fn chunk_rows(m: usize, flops_per_row: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    let for_balance = m.div_ceil(threads * 4).max(1);
    let for_overhead = (MIN_CHUNK_FLOPS / flops_per_row.max(1)).max(1);
    for_balance.max(for_overhead).min(m)
}

/// out = a @ b with a: [m,k], b: [k,n]. Overwrites out.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let rows_job = |i0: usize, out_rows: &mut [T]| {
        out_rows.fill(T::ZERO);
        for (r, out_row) in out_rows.chunks_mut(n).enumerate() {
            let i = i0 + r;
            for kk in 0..k {
                let aik = a[i * k + kk];
                let b_row = &b[kk * n..kk * n + n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bv;
                }
            }
        }
    };
    if 2 * m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        let rows = chunk_rows(m, 2 * k * n);
        out.par_chunks_mut(rows * n)
            .enumerate()
            .for_each(|(ci, chunk)| rows_job(ci * rows, chunk));
    } else {
        rows_job(0, out);
    }
}

/// out = a @ b^T with a: [m,k], b: [n,k]. Overwrites out.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let rows_job = |i0: usize, out_rows: &mut [T]| {
        for (r, out_row) in out_rows.chunks_mut(n).enumerate() {
            let a_row = &a[(i0 + r) * k..(i0 + r) * k + k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[j * k..j * k + k];
                let mut acc = T::ZERO;
                for (&av, &bv) in a_row.iter().zip(b_row) {
                    acc += av * bv;
                }
                *o = acc;
            }
        }
    };
    if 2 * m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        let rows = chunk_rows(m, 2 * k * n);
        out.par_chunks_mut(rows * n)
            .enumerate()
            .for_each(|(ci, chunk)| rows_job(ci * rows, chunk));
    } else {
        rows_job(0, out);
    }
}

/// out = a^T @ b with a: [m,k], b: [m,n], out: [k,n]. Overwrites out.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let rows_job = |k0: usize, out_rows: &mut [T]| {
        out_rows.fill(T::ZERO);
        for (r, out_row) in out_rows.chunks_mut(n).enumerate() {
            let kk = k0 + r;
            for i in 0..m {
                let aik = a[i * k + kk];
                let b_row = &b[i * n..i * n + n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bv;
                }
            }
        }
    };
    if 2 * m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        let rows = chunk_rows(k, 2 * m * n);
        out.par_chunks_mut(rows * n)
            .enumerate()
            .for_each(|(ci, chunk)| rows_job(ci * rows, chunk));
    } else {
        rows_job(0, out);
    }
}

/// Batched matmul over leading batch dim: a [bt,m,k] @ b [bt,k,n] (or b^T when
/// `transpose_rhs`, with b [bt,n,k]). Overwrites out [bt,m,n].
pub fn batch_matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    bt: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_rhs: bool,
) {
    let (a_sz, b_sz, o_sz) = (m * k, k * n, m * n);
    let batch_job = |b0: usize, out_bs: &mut [T]| {
        for (r, out_b) in out_bs.chunks_mut(o_sz).enumerate() {
            let bi = b0 + r;
            let a_b = &a[bi * a_sz..(bi + 1) * a_sz];
            let b_b = &b[bi * b_sz..(bi + 1) * b_sz];
            if transpose_rhs {
                matmul_nt_serial(a_b, b_b, out_b, m, k, n);
            } else {
                matmul_nn_serial(a_b, b_b, out_b, m, k, n);
            }
        }
    };
    if 2 * bt * m * k * n >= PAR_FLOP_THRESHOLD && bt > 1 {
        let batches = chunk_rows(bt, 2 * m * k * n);
        out.par_chunks_mut(batches * o_sz)
            .enumerate()
            .for_each(|(ci, chunk)| batch_job(ci * batches, chunk));
    } else {
        batch_job(0, out);
    }
}

fn matmul_nn_serial<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    out.fill(T::ZERO);
    for i in 0..m {
        let out_row = &mut out[i * n..i * n + n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let b_row = &b[kk * n..kk * n + n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

fn matmul_nt_serial<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..i * k + k];
        for j in 0..n {
            let b_row = &b[j * k..j * k + k];
            let mut acc = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
}
