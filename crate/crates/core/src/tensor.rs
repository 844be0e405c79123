//! Dense row-major tensors and the scalar trait the numeric kernels are
//! generic over.
//!
//! Models run in `f32`. Every kernel is also instantiable in `f64`, which is
//! what the finite-difference gradient checks use so that rounding noise stays
//! far below the tolerances being asserted.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{invalid, shape_err, Result};

pub trait Real:
    Float
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
    fn of(v: f64) -> Self;

    fn f64(self) -> f64;

    /// Raw bit pattern, widened; used for fingerprints.
    fn bits(self) -> u64;

    /// Row-major strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Matrix operand: a row-major buffer, optionally read transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, transposed: false }
    }

    /// Logical transpose of a stored `rows x cols` buffer.
    pub fn t(self) -> Self {
        Mat { transposed: !self.transposed, ..self }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = alpha * a * b + beta * out`, with `out` a dense `m x n` row-major buffer.
pub fn gemm<T: Real>(alpha: T, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.logical();
    let (kb, n) = b.logical();
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!(a.data.len(), a.rows * a.cols, "gemm lhs buffer");
    assert_eq!(b.data.len(), b.rows * b.cols, "gemm rhs buffer");
    assert_eq!(out.len(), m * n, "gemm output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: buffer lengths were checked against the logical shapes above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor { shape, data: vec![value; len] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Tensor { shape, data: (0..len).map(&mut f).collect() }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(shape_err!("expected a 4-d NCHW tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(shape_err!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn ensure_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err!("{what}: expected {:?}, got {:?}", shape, self.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        other.ensure_shape(&self.shape, "elementwise operand")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        other.ensure_shape(&self.shape, "accumulation operand")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        other.ensure_shape(&self.shape, "axpy operand")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        other.ensure_shape(&self.shape, "comparison operand")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Matrix product of two 2-d tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let [m, k] = self.dims2()?;
        let [k2, n] = other.dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul {:?} x {:?}", self.shape, other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), Mat::new(&self.data, m, k), Mat::new(&other.data, k, n), T::zero(), &mut out);
        Tensor::new([m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let [r, c] = self.dims2()?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor::new([c, r], out)
    }

    /// Rows `[start, start + count)` along the leading axis.
    pub fn slice_outer(&self, start: usize, count: usize) -> Result<Self> {
        let outer = *self.shape.first().ok_or_else(|| invalid!("cannot slice a 0-d tensor"))?;
        if start + count > outer {
            return Err(shape_err!("slice {start}..{} of leading axis {outer}", start + count));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Tensor::new(shape, self.data[start * inner..(start + count) * inner].to_vec())
    }

    /// Stacks equally shaped tensors along a new (or the existing leading) axis.
    pub fn concat_outer(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid!("nothing to concatenate"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut outer = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(shape_err!("concat {:?} with {:?}", first.shape, p.shape));
            }
            outer += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Tensor::new(shape, data)
    }

    /// FNV-1a over shape and raw element bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for &d in &self.shape {
            h.write_u64(d as u64);
        }
        for v in &self.data {
            h.write_u64(v.bits());
        }
        h.finish()
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub(crate) fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Tensor::new([2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new([3, 2], vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transposed_operands() {
        // a stored 3x2, used as its 2x3 transpose
        let a = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0]; // stored 2x3 -> 3x2
        let mut out = [0.0; 4];
        gemm(1.0, Mat::new(&a, 3, 2).t(), Mat::new(&b, 2, 3).t(), 0.0, &mut out);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::from_fn([3, 4], |i| i as f32);
        assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }

    #[test]
    fn fingerprint_sees_single_bit() {
        let a = Tensor::from_fn([8], |i| i as f32);
        let mut b = a.clone();
        b.data_mut()[3] = f32::from_bits(b.data()[3].to_bits() ^ 1);
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
