#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srm::train::{batch_loss_and_grad, TrainBatch};
use srm::ModelParams;

/// One scalar whose analytic and numerical derivatives disagree.
#[derive(Debug)]
pub struct FdMismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub tensors: Vec<String>,
    pub worst_rel: f64,
    pub mismatches: Vec<FdMismatch>,
}

pub fn loss(params: &ModelParams<f64>, batch: &TrainBatch) -> f64 {
    batch_loss_and_grad(params, batch).unwrap().0.loss
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Difference {
    /// `(L(x+h) − L(x−h)) / 2h`, error O(h²).
    Central,
    /// Richardson combination of central differences at `h` and `h/2`,
    /// error O(h⁴).
    Richardson,
}

/// Numerical derivatives with step `h` on every scalar whose analytic
/// gradient exceeds `floor` in magnitude.
pub fn finite_difference_check(
    params: &ModelParams<f64>,
    batch: &TrainBatch,
    scheme: Difference,
    h: f64,
    floor: f64,
    tol: f64,
) -> FdReport {
    let (_, grads) = batch_loss_and_grad(params, batch).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|t| (t.name, t.data.to_vec())).collect();
    let mut report = FdReport::default();
    let mut probe = params.clone();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let mut touched = false;
        for (i, &gi) in g.iter().enumerate() {
            if gi.abs() <= floor {
                continue;
            }
            let orig = probe.tensors()[ti].data[i];
            let mut central = |step: f64| {
                probe.tensors_mut()[ti].data[i] = orig + step;
                let up = loss(&probe, batch);
                probe.tensors_mut()[ti].data[i] = orig - step;
                let down = loss(&probe, batch);
                probe.tensors_mut()[ti].data[i] = orig;
                (up - down) / (2.0 * step)
            };
            let fd = match scheme {
                Difference::Central => central(h),
                Difference::Richardson => {
                    let coarse = central(h);
                    (4.0 * central(h / 2.0) - coarse) / 3.0
                }
            };
            let rel = (gi - fd).abs() / gi.abs().max(fd.abs());
            report.checked += 1;
            touched = true;
            report.worst_rel = report.worst_rel.max(rel);
            if rel > tol {
                report.mismatches.push(FdMismatch {
                    tensor: name.clone(),
                    index: i,
                    analytic: gi,
                    numeric: fd,
                    rel,
                });
            }
        }
        if touched {
            report.tensors.push(name.clone());
        }
    }
    report
}

/// Random token rows with every position but the last scored.
pub fn random_batch(rows: usize, n: usize, vocab: usize, seed: u64) -> TrainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<Vec<u32>> = (0..rows)
        .map(|_| (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect())
        .collect();
    let loss_mask = (0..rows).map(|_| (0..n).map(|t| t + 1 < n).collect()).collect();
    TrainBatch { tokens, loss_mask }
}

/// Perturb every tensor so no gradient path sits at an initialization value
/// (zero biases, unit gains, equal combination weights).
pub fn scramble(params: &mut ModelParams<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}
