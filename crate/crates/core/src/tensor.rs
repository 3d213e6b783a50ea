//! Dense row-major tensors and the scalar trait the layer code is generic over.
//!
//! Training runs in `f32`; every layer is also instantiable in `f64` so the
//! finite-difference checker has enough precision to be meaningful.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{input_err, Result};

pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const NAME: &'static str;

    /// `c = alpha * op(a) * op(b) + beta * c` on raw strided buffers.
    ///
    /// # Safety
    /// The strides must describe matrices that lie inside the given slices.
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

    fn lit(v: f64) -> Self {
        Self::from(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

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

impl Scalar for f64 {
    const NAME: &'static str = "f64";

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

/// Row-major matrix operand: `data` holds a `rows x cols` matrix, optionally
/// read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Mat { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Mat { transposed: !self.transposed, ..self }
    }

    fn dims(&self) -> (usize, usize) {
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

/// `out (m x n) = a * b + (accumulate ? out : 0)`
pub(crate) fn gemm<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimension");
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            out[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: dims and strides are derived from slices whose lengths were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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
        )
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(input_err!("tensor extents must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(input_err!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
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

    /// `(B, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(input_err!("expected a [B,C,H,W] tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(input_err!("expected a rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(input_err!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(input_err!("shape mismatch: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Contiguous slab for batch item `b` of a tensor whose first axis is the batch.
    pub fn item(&self, b: usize) -> &[T] {
        let per = self.data.len() / self.shape[0];
        &self.data[b * per..(b + 1) * per]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let per = self.data.len() / self.shape[0];
        &mut self.data[b * per..(b + 1) * per]
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| input_err!("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.expect_same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Select batch items (first axis) by index.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.len() / self.shape[0]);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(input_err!("index {i} out of range for batch of {}", self.shape[0]));
            }
            data.extend_from_slice(self.item(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::from_vec(&shape, data)
    }
}

/// Concatenate two `[B,C,H,W]` tensors along channels.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(input_err!(
            "cannot concatenate {:?} and {:?} along channels",
            a.shape(),
            b.shape()
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..ba {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec(&[ba, ca + cb, ha, wa], data)
}

/// Inverse of [`concat_channels`]: split the channel axis at `c_first`.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, c_first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    if c_first == 0 || c_first >= c {
        return Err(input_err!("cannot split {c} channels at {c_first}"));
    }
    let hw = h * w;
    let mut first = Vec::with_capacity(b * c_first * hw);
    let mut second = Vec::with_capacity(b * (c - c_first) * hw);
    for i in 0..b {
        let item = x.item(i);
        first.extend_from_slice(&item[..c_first * hw]);
        second.extend_from_slice(&item[c_first * hw..]);
    }
    Ok((
        Tensor::from_vec(&[b, c_first, h, w], first)?,
        Tensor::from_vec(&[b, c - c_first, h, w], second)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn gemm_matches_nested_loops() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let mut out = vec![0.0; 8];
        gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), &mut out, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((out[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // a^T (3x2) * a (2x3), accumulated on top of ones
        let mut out = vec![1.0; 9];
        gemm(Mat::new(&a, 2, 3).t(), Mat::new(&a, 2, 3), &mut out, true);
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = 1.0 + (0..2).map(|k| a[k * 3 + i] * a[k * 3 + j]).sum::<f64>();
                assert!((out[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::<f32>::from_fn(&[2, 1, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 3, 2, 2], |i| -(i as f32));
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        let (a2, b2) = split_channels(&c, 1).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
