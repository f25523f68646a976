//! Dense row-major tensors and the numeric kernels shared by the forward
//! functions and the autograd tape.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is used for training, `f64` for
/// gradient oracles.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn erf(self) -> Self;

    /// `c[m×n] += a[m×k] · b[k×n]` over strided operands.
    ///
    /// # Safety
    /// Every strided index must be in bounds of its buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("literal representable")
    }

    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    unsafe fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    unsafe fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::contract(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor from `f64` values, converting to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
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

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dims(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dims("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max))
    }
}

/// `C = A·B` for `A: [m×k]`, `B: [k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dims("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    mm_nn(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Gaussian CDF.
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn normal_pdf<T: Scalar>(x: T) -> T {
    T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * T::lit(0.5)).exp()
}

/// Exact GeLU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * normal_cdf(v))
}

/// Softmax over the last axis, with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.last_dim();
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(T::lit(f64::NEG_INFINITY), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::from_parts(x.shape.clone(), out)
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Row-wise layer normalization with population variance.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if eps <= T::zero() {
        return Err(Error::contract("layer_norm eps must be positive"));
    }
    let d = x.last_dim();
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(Error::dims("layer_norm", &x.shape, &gamma.shape));
    }
    let (y, _, _) = layer_norm_forward(&x.data, &gamma.data, &beta.data, d, eps);
    Ok(Tensor::from_parts(x.shape.clone(), y))
}

/// Returns `(output, normalized, inv_std)`.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut norm = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let dn = T::lit(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            norm[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, norm, inv_std)
}

// Matmul kernels on flat row-major slices. All accumulate into `out`.

fn check_mm<T>(a: &[T], b: &[T], out: &[T], m: usize, k: usize, n: usize) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && out.len() >= m * n,
        "matmul buffer too small"
    );
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check_mm(a, b, out, m, k, n);
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: buffer sizes checked above; all strides describe dense row-major layouts.
    unsafe { T::gemm_acc(m, k, n, a.as_ptr(), k_, 1, b.as_ptr(), n_, 1, out.as_mut_ptr(), n_, 1) }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check_mm(a, b, out, m, k, n);
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: as in `mm_nn`, with `b` read column-major.
    unsafe { T::gemm_acc(m, k, n, a.as_ptr(), k_, 1, b.as_ptr(), 1, k_, out.as_mut_ptr(), n_, 1) }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(
        a.len() >= m * k && b.len() >= m * n && out.len() >= k * n,
        "matmul buffer too small"
    );
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: as in `mm_nn`, with `a` read column-major.
    unsafe { T::gemm_acc(k, m, n, a.as_ptr(), 1, k_, b.as_ptr(), n_, 1, out.as_mut_ptr(), n_, 1) }
}
