//! Synthetic copy task: `payload ∥ delimiter ∥ payload`, scored only on the
//! second payload.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrmError};
use crate::real::Real;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyTaskSpec {
    pub copy_len: usize,
    /// Token ids payload symbols are drawn from, uniformly.
    pub payload: Vec<u32>,
    pub delimiter: u32,
}

impl CopyTaskSpec {
    /// Payload of `symbols` lowercase letters, `|` as the delimiter.
    pub fn letters(copy_len: usize, symbols: usize) -> Result<Self> {
        if symbols == 0 || symbols > 26 {
            return Err(SrmError::config("payload", format!("{symbols} symbols, expected 1..=26")));
        }
        Ok(CopyTaskSpec {
            copy_len,
            payload: (0..symbols as u32).map(|i| u32::from(b'a') + i).collect(),
            delimiter: u32::from(b'|'),
        })
    }

    pub fn context_len(&self) -> usize {
        2 * self.copy_len + 1
    }

    pub fn validate(&self, n_ctx: usize) -> Result<()> {
        if self.copy_len == 0 {
            return Err(SrmError::config("copy_len", "must be positive"));
        }
        if self.payload.is_empty() {
            return Err(SrmError::config("payload", "must not be empty"));
        }
        if self.payload.contains(&self.delimiter) {
            return Err(SrmError::config("delimiter", "also appears in the payload"));
        }
        if self.context_len() > n_ctx {
            return Err(SrmError::Length {
                requested: self.context_len(),
                n_ctx,
            });
        }
        Ok(())
    }

    /// One row for a given payload.
    pub fn row(&self, payload: &[u32]) -> (Vec<u32>, Vec<bool>) {
        let m = payload.len();
        let mut tokens = Vec::with_capacity(2 * m + 1);
        tokens.extend_from_slice(payload);
        tokens.push(self.delimiter);
        tokens.extend_from_slice(payload);
        let mask = (0..2 * m + 1).map(|i| i > m).collect();
        (tokens, mask)
    }
}

/// Rows of a copy-task batch. `target_mask` marks the second payload.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyBatch {
    pub tokens: Vec<Vec<u32>>,
    pub target_mask: Vec<Vec<bool>>,
}

impl CopyBatch {
    /// Mask over the positions whose prediction is a target token.
    pub fn loss_mask(&self) -> Vec<Vec<bool>> {
        self.target_mask.iter().map(|m| shift_mask(m)).collect()
    }
}

/// Turn a mask over target tokens into a mask over the positions predicting
/// them.
pub fn shift_mask(target: &[bool]) -> Vec<bool> {
    let mut out: Vec<bool> = target.iter().skip(1).copied().collect();
    out.push(false);
    out
}

pub fn copy_task_batch(spec: &CopyTaskSpec, batch: usize, seed: u64) -> CopyBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(batch);
    let mut target_mask = Vec::with_capacity(batch);
    for _ in 0..batch {
        let payload: Vec<u32> = (0..spec.copy_len)
            .map(|_| spec.payload[rng.gen_range(0..spec.payload.len())])
            .collect();
        let (t, m) = spec.row(&payload);
        tokens.push(t);
        target_mask.push(m);
    }
    CopyBatch { tokens, target_mask }
}

/// `(correct, total)` argmax predictions over the target positions.
pub fn copy_accuracy<T: Real>(logits: &[Matrix<T>], batch: &CopyBatch) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for ((l, toks), mask) in logits.iter().zip(&batch.tokens).zip(batch.loss_mask()) {
        for (t, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let row: Vec<f64> = l.row(t).iter().map(|v| v.f64()).collect();
            correct += usize::from(crate::sampling::argmax(&row) == toks[t + 1]);
            total += 1;
        }
    }
    (correct, total)
}
