use crate::error::{Result, SrmError};

/// Probability that at least one of `k` samples drawn without replacement
/// from `n`, of which `c` are correct, is correct: `1 − C(n−c, k)/C(n, k)`.
///
/// The ratio is evaluated as `Π_{i<k} (1 − c/(n−i))` in log space.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(SrmError::Parameter(format!("k = {k} outside 1..={n}")));
    }
    if c > n {
        return Err(SrmError::Parameter(format!("c = {c} exceeds n = {n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let log_miss: f64 = (0..k).map(|i| (-(c as f64) / (n - i) as f64).ln_1p()).sum();
    Ok(-log_miss.exp_m1())
}

/// Mean pass@k over questions given `(n, c)` per question.
pub fn mean_pass_at_k(counts: &[(usize, usize)], k: usize) -> Result<f64> {
    if counts.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &(n, c) in counts {
        total += pass_at_k(n, c, k)?;
    }
    Ok(total / counts.len() as f64)
}
