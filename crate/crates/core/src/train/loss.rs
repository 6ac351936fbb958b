use crate::error::{Result, SrmError};
use crate::real::Real;
use crate::tensor::Matrix;

/// Per-sequence cross-entropy statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLoss {
    /// Summed loss over masked positions.
    pub loss_sum: f64,
    /// `−log p(token_{t+1})` at each position; zero where unmasked.
    pub per_position: Vec<f64>,
    pub count: usize,
    /// Masked positions whose argmax equals the next token.
    pub correct: usize,
}

fn check_shapes<T: Real>(logits: &Matrix<T>, tokens: &[u32], mask: &[bool]) -> Result<()> {
    if logits.rows() != tokens.len() || mask.len() != tokens.len() {
        return Err(SrmError::Dimension(format!(
            "logits have {} rows for {} tokens and a mask of {}",
            logits.rows(),
            tokens.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// Shifted next-token cross-entropy of one sequence, with the derivative of
/// `scale · loss_sum` with respect to the logits.
///
/// `mask[t]` marks that the prediction made at `t` (of `tokens[t + 1]`)
/// counts; the last position has no target and must be unmasked.
pub fn sequence_ce<T: Real>(logits: &Matrix<T>, tokens: &[u32], mask: &[bool], scale: f64) -> Result<(SequenceLoss, Matrix<T>)> {
    check_shapes(logits, tokens, mask)?;
    let n = tokens.len();
    if n > 0 && mask[n - 1] {
        return Err(SrmError::Dimension("the last position has no next token to predict".into()));
    }
    let vocab = logits.cols();
    let mut grad = Matrix::zeros(n, vocab);
    let mut out = SequenceLoss {
        loss_sum: 0.0,
        per_position: vec![0.0; n],
        count: 0,
        correct: 0,
    };
    for t in 0..n.saturating_sub(1) {
        if !mask[t] {
            continue;
        }
        let target = tokens[t + 1] as usize;
        let row = logits.row(t);
        let mut best = 0;
        let mut m = row[0].f64();
        for (i, v) in row.iter().enumerate().skip(1) {
            if v.f64() > m {
                m = v.f64();
                best = i;
            }
        }
        let z: f64 = row.iter().map(|v| (v.f64() - m).exp()).sum();
        let lse = m + z.ln();
        let l = lse - row[target].f64();
        out.per_position[t] = l;
        out.loss_sum += l;
        out.count += 1;
        out.correct += usize::from(best == target);
        for (g, v) in grad.row_mut(t).iter_mut().zip(row) {
            *g = T::of(scale * (v.f64() - lse).exp());
        }
        let gt = &mut grad.row_mut(t)[target];
        *gt -= T::of(scale);
    }
    Ok((out, grad))
}

/// Mean shifted cross-entropy over every masked position of a batch, plus
/// per-position losses.
pub fn shifted_ce_loss<T: Real>(logits: &[Matrix<T>], tokens: &[Vec<u32>], mask: &[Vec<bool>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != tokens.len() || mask.len() != tokens.len() {
        return Err(SrmError::Dimension("batch sizes of logits, tokens and mask differ".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    let mut per = Vec::with_capacity(tokens.len());
    for ((l, t), m) in logits.iter().zip(tokens).zip(mask) {
        let (s, _) = sequence_ce(l, t, m, 0.0)?;
        total += s.loss_sum;
        count += s.count;
        per.push(s.per_position);
    }
    if count == 0 {
        return Err(SrmError::EmptyMask);
    }
    Ok((total / count as f64, per))
}

/// Number of positions contributing to the loss.
pub fn masked_count(mask: &[Vec<bool>]) -> usize {
    mask.iter().map(|m| m.iter().filter(|&&b| b).count()).sum()
}
