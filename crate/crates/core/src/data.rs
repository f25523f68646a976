//! Synthetic majority task and calibration sampling.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TokenBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskConfig {
    pub train_size: usize,
    pub held_out_size: usize,
    pub seq_len: usize,
    pub vocab: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            train_size: 8192,
            held_out_size: 2048,
            seq_len: 16,
            vocab: 64,
        }
    }
}

/// Labeled sequences stored row-major, `len × seq_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn batch(&self, rows: &[usize]) -> Result<(TokenBatch, Vec<usize>)> {
        let ids = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Ok((TokenBatch::new(rows.len(), self.seq_len, ids)?, labels))
    }

    /// Consecutive batches covering the split in order.
    pub fn chunks(&self, batch: usize) -> impl Iterator<Item = Result<(TokenBatch, Vec<usize>)>> + '_ {
        let batch = batch.max(1);
        (0..self.len()).step_by(batch).map(move |start| {
            let rows: Vec<usize> = (start..(start + batch).min(self.len())).collect();
            self.batch(&rows)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub vocab: usize,
    pub num_classes: usize,
    pub train: Split,
    pub held_out: Split,
}

/// 1 if strictly more than half of the tokens fall in the lower half of the
/// vocabulary, else 0.
pub fn majority_label(seq: &[usize], vocab: usize) -> usize {
    let low = seq.iter().filter(|&&t| t < vocab / 2).count();
    usize::from(2 * low > seq.len())
}

pub fn gen_synthetic_task(cfg: &TaskConfig, seed: u64) -> Result<Dataset> {
    if cfg.seq_len == 0 || cfg.vocab < 2 || cfg.train_size == 0 {
        return Err(Error::contract(format!("invalid task config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize| {
        let tokens: Vec<usize> = (0..n * cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab)).collect();
        let labels = tokens
            .chunks(cfg.seq_len)
            .map(|s| majority_label(s, cfg.vocab))
            .collect();
        Split {
            seq_len: cfg.seq_len,
            tokens,
            labels,
        }
    };
    let train = split(cfg.train_size);
    let held_out = split(cfg.held_out_size);
    Ok(Dataset {
        vocab: cfg.vocab,
        num_classes: 2,
        train,
        held_out,
    })
}

/// Unlabeled subset of the training split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CalibrationSet {
    pub seq_len: usize,
    tokens: Vec<usize>,
    /// Training-split row of each calibration example.
    pub source_rows: Vec<usize>,
}

impl CalibrationSet {
    pub fn from_sequences(seq_len: usize, tokens: Vec<usize>) -> Result<Self> {
        if seq_len == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(seq_len) {
            return Err(Error::Input(
                "calibration tokens must be a non-empty whole number of rows".into(),
            ));
        }
        let n = tokens.len() / seq_len;
        Ok(Self {
            seq_len,
            tokens,
            source_rows: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn batch(&self, rows: &[usize]) -> Result<TokenBatch> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::contract(format!("calibration row {bad} out of range")));
        }
        let ids = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        TokenBatch::new(rows.len(), self.seq_len, ids)
    }

    /// Row indices drawn uniformly with replacement.
    pub fn sample_rows(&self, rng: &mut impl Rng, batch: usize) -> Vec<usize> {
        (0..batch).map(|_| rng.gen_range(0..self.len())).collect()
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Result<TokenBatch> {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.batch(&rows)
    }
}

/// Uniform sample without replacement from the training split, labels
/// dropped.
pub fn sample_calibration(dataset: &Dataset, size: usize, seed: u64) -> Result<CalibrationSet> {
    let n = dataset.train.len();
    if size == 0 || size > n {
        return Err(Error::contract(format!("calibration size {size} not in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = index::sample(&mut rng, n, size).into_vec();
    rows.sort_unstable();
    let tokens = rows
        .iter()
        .flat_map(|&r| dataset.train.row(r).iter().copied())
        .collect();
    Ok(CalibrationSet {
        seq_len: dataset.train.seq_len,
        tokens,
        source_rows: rows,
    })
}
