//! Oracles shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

pub mod fuzz;
pub mod gradcheck;

use mrem::quant::{quantize, QuantSpec};
use mrem::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Checks grid membership, in-range error, idempotence and monotonicity of
/// the uniform quantizers on `cases` random `(x, s, b)` draws. Returns a
/// description of every violation.
pub fn quantizer_law_violations(cases: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for case in 0..cases {
        let bits = rng.gen_range(2..=8u32);
        let step: f64 = 10f64.powf(rng.gen_range(-3.0..1.0));
        let spec = if case % 2 == 0 {
            QuantSpec::symmetric(bits, step)
        } else {
            QuantSpec::asymmetric(bits, step)
        };
        let (lo, hi) = spec.scheme.levels();
        let (lo, hi) = (lo as f64, hi as f64);
        let span = step * (hi - lo + 4.0);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-span..span)).collect();
        let mut sorted = x.clone();
        sorted.sort_by(f64::total_cmp);
        let xt = Tensor::new(vec![8], sorted.clone()).unwrap();
        let q = quantize(&xt, &spec).unwrap();
        let eps = 1e-9 * step.max(1.0);
        for (&v, &y) in sorted.iter().zip(q.data()) {
            let k = y / step;
            if (k - k.round()).abs() > 1e-9 || k.round() < lo || k.round() > hi {
                bad.push(format!("case {case}: {y} off the grid (s={step}, b={bits})"));
            }
            let in_range = v / step >= lo - 0.5 && v / step <= hi + 0.5;
            if in_range && (y - v).abs() > step / 2.0 + eps {
                bad.push(format!("case {case}: |q({v}) - {v}| = {} > s/2", (y - v).abs()));
            }
        }
        let qq = quantize(&q, &spec).unwrap();
        if qq.data().iter().zip(q.data()).any(|(a, b)| (a - b).abs() > eps) {
            bad.push(format!("case {case}: not idempotent"));
        }
        if q.data().windows(2).any(|w| w[1] < w[0]) {
            bad.push(format!("case {case}: not monotone"));
        }
    }
    bad
}

use mrem::data::{gen_synthetic_task, sample_calibration, CalibrationSet, Dataset, TaskConfig};
use mrem::ModelConfig;

/// A small encoder that keeps fuzzing and end-to-end runs fast.
pub fn tiny_config(layers: usize) -> ModelConfig {
    ModelConfig {
        layers,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        vocab: 16,
        max_seq_len: 8,
        num_classes: 2,
    }
}

pub fn tiny_task() -> TaskConfig {
    TaskConfig {
        train_size: 256,
        held_out_size: 64,
        seq_len: 8,
        vocab: 16,
    }
}

pub fn tiny_data(seed: u64, calib: usize) -> (Dataset, CalibrationSet) {
    let d = gen_synthetic_task(&tiny_task(), seed).unwrap();
    let c = sample_calibration(&d, calib, seed + 1).unwrap();
    (d, c)
}
