//! Uniform, asymmetric and ternary quantizers with straight-through
//! gradients and learned step sizes.
//!
//! A quantizer maps `x` to `s · clip(round(x / s), lo, hi)`. The symmetric
//! grid is `{-(2^(b-1)-1), …, 2^(b-1)-1}`; the asymmetric grid is anchored at
//! zero, `{0, …, 2^b - 1}`. Ties round half away from zero.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Lower bound applied to every step size.
pub const MIN_STEP: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuantMode {
    Symmetric,
    Asymmetric,
    Ternary,
}

/// `PerChannel` keeps one step per output channel. For a `[d_in, d_out]`
/// weight that is the last axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Granularity {
    PerTensor,
    PerChannel,
}

/// Static part of a quantization site: everything except the step values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantScheme {
    pub bits: u32,
    pub mode: QuantMode,
    pub granularity: Granularity,
}

impl QuantScheme {
    pub fn new(bits: u32, mode: QuantMode, granularity: Granularity) -> Result<Self> {
        let scheme = Self {
            bits,
            mode,
            granularity,
        };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn symmetric(bits: u32) -> Self {
        Self {
            bits,
            mode: QuantMode::Symmetric,
            granularity: Granularity::PerTensor,
        }
    }

    pub fn asymmetric(bits: u32) -> Self {
        Self {
            bits,
            mode: QuantMode::Asymmetric,
            granularity: Granularity::PerTensor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=31).contains(&self.bits) {
            return Err(Error::contract(format!("bit-width {} outside 2..=31", self.bits)));
        }
        if self.mode == QuantMode::Ternary && self.bits != 2 {
            return Err(Error::contract("ternary quantization requires bits == 2"));
        }
        Ok(())
    }

    /// Integer clip range `(Q_N, Q_P)`.
    pub fn levels(&self) -> (i64, i64) {
        match self.mode {
            QuantMode::Symmetric | QuantMode::Ternary => {
                let q = (1i64 << (self.bits - 1)) - 1;
                (-q, q)
            }
            QuantMode::Asymmetric => (0, (1i64 << self.bits) - 1),
        }
    }
}

/// A quantization site with its current step size(s).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantSpec<T = f32> {
    pub scheme: QuantScheme,
    pub step: Vec<T>,
    pub learnable: bool,
}

impl<T: Scalar> QuantSpec<T> {
    pub fn symmetric(bits: u32, step: T) -> Self {
        Self {
            scheme: QuantScheme::symmetric(bits),
            step: vec![step],
            learnable: true,
        }
    }

    pub fn asymmetric(bits: u32, step: T) -> Self {
        Self {
            scheme: QuantScheme::asymmetric(bits),
            step: vec![step],
            learnable: true,
        }
    }

    pub fn per_channel(mut self, steps: Vec<T>) -> Self {
        self.scheme.granularity = Granularity::PerChannel;
        self.step = steps;
        self
    }

    fn check_steps(&self) -> Result<()> {
        self.scheme.validate()?;
        if self.step.is_empty() || self.step.iter().any(|&s| s.is_nan() || s <= T::zero()) {
            return Err(Error::contract("quantization step sizes must be positive"));
        }
        Ok(())
    }
}

/// `s · clip(round(x / s), lo, hi)` for a single value.
#[inline]
pub fn quantize_value<T: Scalar>(x: T, step: T, lo: T, hi: T) -> T {
    step * (x / step).round().max(lo).min(hi)
}

/// Resolves the step index for flat element `i`.
fn step_index(granularity: Granularity, channels: usize, i: usize) -> usize {
    match granularity {
        Granularity::PerTensor => 0,
        Granularity::PerChannel => i % channels,
    }
}

fn check_granularity<T: Scalar>(x: &Tensor<T>, scheme: &QuantScheme, steps: usize) -> Result<()> {
    let expected = match scheme.granularity {
        Granularity::PerTensor => 1,
        Granularity::PerChannel => x.last_dim(),
    };
    if steps != expected {
        return Err(Error::contract(format!(
            "{:?} quantization of {:?} needs {expected} steps, got {steps}",
            scheme.granularity,
            x.shape()
        )));
    }
    Ok(())
}

/// Uniform quantization of `x` with explicit step values. Ternary schemes
/// are routed to [`ternarize_twn`] and ignore `steps`.
pub fn fake_quantize<T: Scalar>(x: &Tensor<T>, scheme: &QuantScheme, steps: &[T]) -> Result<Tensor<T>> {
    if scheme.mode == QuantMode::Ternary {
        return Ok(ternarize_twn(x).quantized);
    }
    check_granularity(x, scheme, steps.len())?;
    let (lo, hi) = scheme.levels();
    let (lo, hi) = (T::lit(lo as f64), T::lit(hi as f64));
    let channels = x.last_dim();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let s = steps[step_index(scheme.granularity, channels, i)];
        *v = quantize_value(*v, s, lo, hi);
    }
    Ok(out)
}

pub fn quantize<T: Scalar>(x: &Tensor<T>, spec: &QuantSpec<T>) -> Result<Tensor<T>> {
    if spec.scheme.mode != QuantMode::Ternary {
        spec.check_steps()?;
    }
    fake_quantize(x, &spec.scheme, &spec.step)
}

pub fn quantize_symmetric<T: Scalar>(x: &Tensor<T>, spec: &QuantSpec<T>) -> Result<Tensor<T>> {
    if spec.scheme.mode != QuantMode::Symmetric {
        return Err(Error::contract("quantize_symmetric needs a symmetric spec"));
    }
    quantize(x, spec)
}

pub fn quantize_asymmetric<T: Scalar>(x: &Tensor<T>, spec: &QuantSpec<T>) -> Result<Tensor<T>> {
    if spec.scheme.mode != QuantMode::Asymmetric {
        return Err(Error::contract("quantize_asymmetric needs an asymmetric spec"));
    }
    quantize(x, spec)
}

/// Row-wise quantization of a `[d_out × d_in]` matrix, one step per row.
pub fn quantize_per_channel<T: Scalar>(w: &Tensor<T>, steps: &[T], spec: &QuantSpec<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 {
        return Err(Error::contract(format!(
            "per-channel weights must be 2-D, got {:?}",
            w.shape()
        )));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    if steps.len() != rows {
        return Err(Error::contract(format!(
            "{} per-channel steps for {rows} output rows",
            steps.len()
        )));
    }
    if steps.iter().any(|&s| s.is_nan() || s <= T::zero()) {
        return Err(Error::contract("quantization step sizes must be positive"));
    }
    spec.scheme.validate()?;
    let (lo, hi) = spec.scheme.levels();
    let (lo, hi) = (T::lit(lo as f64), T::lit(hi as f64));
    let mut out = w.clone();
    for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
        for v in row {
            *v = quantize_value(*v, steps[r], lo, hi);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TernaryResult<T = f32> {
    pub quantized: Tensor<T>,
    pub alpha: T,
    pub delta: T,
}

/// Ternary weight networks: `Δ = 0.7·mean|w|`, `α = mean(|w_i| : |w_i| > Δ)`.
pub fn ternarize_twn<T: Scalar>(w: &Tensor<T>) -> TernaryResult<T> {
    let delta = T::lit(0.7) * w.data().iter().map(|v| v.abs()).sum::<T>() / T::lit(w.numel() as f64);
    let mut total = T::zero();
    let mut count = 0usize;
    for &v in w.data() {
        if v.abs() > delta {
            total += v.abs();
            count += 1;
        }
    }
    let alpha = if count == 0 {
        T::zero()
    } else {
        total / T::lit(count as f64)
    };
    let quantized = w.map(|v| if v.abs() > delta { alpha * v.signum() } else { T::zero() });
    TernaryResult {
        quantized,
        alpha,
        delta,
    }
}

/// Step-size initialization from data: `2·mean|x| / sqrt(Q_P)`, floored at
/// [`MIN_STEP`].
pub fn init_step_size<T: Scalar>(x: &Tensor<T>, bits: u32, mode: QuantMode) -> T {
    init_step_from_slice(x.data().iter().copied(), bits, mode)
}

fn init_step_from_slice<T: Scalar>(values: impl Iterator<Item = T>, bits: u32, mode: QuantMode) -> T {
    let (mut total, mut n) = (0.0f64, 0usize);
    for v in values {
        total += v.abs().to_f64();
        n += 1;
    }
    let qp = match mode {
        QuantMode::Asymmetric => (1u64 << bits) - 1,
        QuantMode::Symmetric | QuantMode::Ternary => (1u64 << (bits - 1)) - 1,
    } as f64;
    let s = 2.0 * (total / n.max(1) as f64) / qp.sqrt();
    T::lit(s.max(MIN_STEP))
}

/// One initial step per output channel (last axis).
pub fn init_step_sizes_per_channel<T: Scalar>(x: &Tensor<T>, bits: u32, mode: QuantMode) -> Vec<T> {
    let c = x.last_dim();
    (0..c)
        .map(|j| init_step_from_slice(x.data().iter().skip(j).step_by(c).copied(), bits, mode))
        .collect()
}

/// Straight-through gradients for uniform quantization with a learned step.
///
/// Inside the clip range the input gradient passes through unchanged and the
/// step receives `round(q) - q`; outside it the input gradient is zero and
/// the step receives the clip level.
pub fn ste_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &QuantSpec<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    if x.shape() != upstream.shape() {
        return Err(Error::contract(format!(
            "ste_backward shapes differ: {:?} vs {:?}",
            x.shape(),
            upstream.shape()
        )));
    }
    if spec.scheme.mode == QuantMode::Ternary {
        return Ok((upstream.clone(), Vec::new()));
    }
    spec.check_steps()?;
    check_granularity(x, &spec.scheme, spec.step.len())?;
    Ok(ste_backward_raw(x, &spec.scheme, &spec.step, upstream))
}

pub(crate) fn ste_backward_raw<T: Scalar>(
    x: &Tensor<T>,
    scheme: &QuantScheme,
    steps: &[T],
    upstream: &Tensor<T>,
) -> (Tensor<T>, Vec<T>) {
    let (lo, hi) = scheme.levels();
    let (lo, hi) = (T::lit(lo as f64), T::lit(hi as f64));
    let channels = x.last_dim();
    let mut grad_x = upstream.clone();
    let mut grad_s = vec![T::zero(); steps.len()];
    for (i, (g, &v)) in grad_x.data_mut().iter_mut().zip(x.data()).enumerate() {
        let k = step_index(scheme.granularity, channels, i);
        let q = v / steps[k];
        let up = *g;
        if q < lo {
            *g = T::zero();
            grad_s[k] += up * lo;
        } else if q > hi {
            *g = T::zero();
            grad_s[k] += up * hi;
        } else {
            grad_s[k] += up * (q.round() - q);
        }
    }
    (grad_x, grad_s)
}
