//! AdamW with decoupled weight decay and a linear learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamStore, QSPEC_PREFIX};
use crate::quant::MIN_STEP;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            first: vec![T::zero(); n],
            second: vec![T::zero(); n],
        }
    }
}

/// One AdamW update of `param` in place. `step` is the 1-based update count
/// used for bias correction.
pub fn adamw_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    moments: &mut Moments<T>,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dims("adamw_update", param.shape(), grad.shape()));
    }
    if moments.first.len() != param.numel() {
        return Err(Error::contract("optimizer moments do not match parameter size"));
    }
    let step = step.max(1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(step);
    let c2 = 1.0 - cfg.beta2.powi(step);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one, lr_t, eps, wd) = (T::one(), T::lit(lr), T::lit(cfg.eps), T::lit(cfg.weight_decay));
    let (c1, c2) = (T::lit(c1), T::lit(c2));
    let it = param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(moments.first.iter_mut().zip(moments.second.iter_mut()));
    for ((p, &g), (m, v)) in it {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr_t * wd * *p - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `eta0 · (1 − t/T)`, clamped to zero past `T`.
pub fn linear_lr(t: usize, total: usize, eta0: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    eta0 * (1.0 - t as f64 / total as f64).max(0.0)
}

/// Optimizer state for a named parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&Moments<T>> {
        self.moments.get(name)
    }

    /// Applies one update to every parameter with a gradient. Nothing is
    /// modified if any gradient is non-finite. Step sizes are clamped to stay
    /// positive afterwards.
    pub fn apply(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::Training {
                    param: name.clone(),
                    reason: "non-finite gradient".into(),
                });
            }
        }
        self.step += 1;
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
            let m = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments::zeros(p.numel()));
            adamw_update(p, g, m, self.step, lr, &self.config)?;
            if name.starts_with(QSPEC_PREFIX) {
                let floor = T::lit(MIN_STEP);
                p.data_mut().iter_mut().for_each(|s| *s = s.max(floor));
            }
        }
        Ok(())
    }
}
