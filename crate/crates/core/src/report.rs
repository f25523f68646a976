//! Evaluation: accuracy, logit distance and per-layer reconstruction error.

use crate::data::{CalibrationSet, Split};
use crate::error::{Error, Result};
use crate::model::{Network, TokenBatch};
use crate::tensor::{Scalar, Tensor};

/// Fraction of `split` whose arg-max logit equals the label.
pub fn accuracy<T: Scalar>(model: &impl Network<T>, split: &Split, batch: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    for chunk in split.chunks(batch) {
        let (tokens, labels) = chunk?;
        let logits = model.forward(&tokens)?.logits;
        let classes = logits.last_dim();
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold(
                    (0, T::neg_infinity()),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0;
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Squared-error accumulator giving the mean over all elements.
#[derive(Clone, Copy, Debug, Default)]
struct MeanSq {
    sum: f64,
    count: usize,
}

impl MeanSq {
    fn add<T: Scalar>(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::dims("reconstruction error", a.shape(), b.shape()));
        }
        self.sum += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x.to_f64() - y.to_f64()).powi(2))
            .sum::<f64>();
        self.count += a.numel();
        Ok(())
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Per-layer mean squared error between quantized and full-precision hidden
/// states (`f_0` through `f_L`) and between logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionReport {
    pub layer_errors: Vec<f64>,
    pub logit_mse: f64,
}

impl ReconstructionReport {
    /// Sum of every layer error plus the logit error.
    pub fn total(&self) -> f64 {
        self.layer_errors.iter().sum::<f64>() + self.logit_mse
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,mse\n");
        for (l, e) in self.layer_errors.iter().enumerate() {
            s += &format!("{l},{e}\n");
        }
        s += &format!("logits,{}\n", self.logit_mse);
        s
    }
}

pub fn reconstruction_report<T: Scalar>(
    fp: &impl Network<T>,
    q: &impl Network<T>,
    batches: &[TokenBatch],
) -> Result<ReconstructionReport> {
    if batches.is_empty() {
        return Err(Error::Input("no evaluation batches".into()));
    }
    let layers = fp.config().layers;
    let mut per_layer = vec![MeanSq::default(); layers + 1];
    let mut logits = MeanSq::default();
    for tokens in batches {
        let a = fp.forward(tokens)?;
        let b = q.forward(tokens)?;
        for (acc, (x, y)) in per_layer.iter_mut().zip(a.hidden.iter().zip(&b.hidden)) {
            acc.add(y, x)?;
        }
        logits.add(&b.logits, &a.logits)?;
    }
    Ok(ReconstructionReport {
        layer_errors: per_layer.iter().map(MeanSq::mean).collect(),
        logit_mse: logits.mean(),
    })
}

/// Fixed evaluation batches: the first `count × batch` calibration examples
/// in order.
pub fn eval_batches(calib: &CalibrationSet, count: usize, batch: usize) -> Result<Vec<TokenBatch>> {
    let n = (count * batch).min(calib.len());
    (0..n)
        .step_by(batch.max(1))
        .map(|start| {
            let rows: Vec<usize> = (start..(start + batch).min(n)).collect();
            calib.batch(&rows)
        })
        .collect()
}
