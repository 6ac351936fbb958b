//! The group-relative objective with a per-token KL penalty, in the regime
//! where each generation batch gets exactly one update (importance ratio 1).

use crate::error::{Result, SrmError};

/// Reward standard deviations below this are clamped.
pub const STD_FLOOR: f64 = 1e-4;

/// `(r − mean r) / max(std r, floor)`, population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// `exp(ref − cur) − (ref − cur) − 1`, non-negative and zero iff equal.
#[inline]
pub fn kl_estimate(current: f64, reference: f64) -> f64 {
    let d = reference - current;
    d.exp_m1() - d
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoObjective {
    /// Value to maximize.
    pub value: f64,
    pub advantages: Vec<f64>,
    /// Advantage broadcast to every token of every sample.
    pub token_advantages: Vec<Vec<f64>>,
    /// Mean over samples of the per-sample mean KL.
    pub kl: f64,
    /// `∂value/∂(current log-prob)` per token.
    pub dlogprob: Vec<Vec<f64>>,
}

/// `(1/G) Σ_i (1/|o_i|) Σ_t (A_i − β·KL_t)` over aligned per-token
/// log-probabilities of the current and reference policies.
pub fn grpo_objective(rewards: &[f64], current: &[Vec<f64>], reference: &[Vec<f64>], beta: f64) -> Result<GrpoObjective> {
    if rewards.len() != current.len() || rewards.len() != reference.len() {
        return Err(SrmError::Dimension("rewards and log-probability batches differ in size".into()));
    }
    let g = rewards.len() as f64;
    let advantages = group_advantages(rewards);
    let mut value = 0.0;
    let mut kl_total = 0.0;
    let mut token_advantages = Vec::with_capacity(rewards.len());
    let mut dlogprob = Vec::with_capacity(rewards.len());
    for ((a, cur), refs) in advantages.iter().zip(current).zip(reference) {
        if cur.len() != refs.len() {
            return Err(SrmError::Dimension(format!(
                "{} current vs {} reference log-probabilities",
                cur.len(),
                refs.len()
            )));
        }
        if cur.is_empty() {
            token_advantages.push(Vec::new());
            dlogprob.push(Vec::new());
            continue;
        }
        let len = cur.len() as f64;
        let mut kl_sum = 0.0;
        let mut d = Vec::with_capacity(cur.len());
        for (&c, &r) in cur.iter().zip(refs) {
            kl_sum += kl_estimate(c, r);
            // ∂KL/∂c = 1 − exp(r − c); the ratio-1 surrogate contributes A.
            d.push((a - beta * (-(r - c).exp_m1())) / (g * len));
        }
        value += (a - beta * kl_sum / len) / g;
        kl_total += kl_sum / len;
        token_advantages.push(vec![*a; cur.len()]);
        dlogprob.push(d);
    }
    Ok(GrpoObjective {
        value,
        advantages,
        token_advantages,
        kl: kl_total / g,
        dlogprob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_rewards_give_zero_advantage() {
        assert_eq!(group_advantages(&[1.0, 1.0, 1.0]), vec![0.0; 3]);
        assert!(group_advantages(&[]).is_empty());
    }

    #[test]
    fn kl_is_nonnegative() {
        for d in [-2.0, -0.1, 0.0, 0.3, 4.0] {
            assert!(kl_estimate(0.0, d) >= 0.0);
        }
        assert_eq!(kl_estimate(-1.25, -1.25), 0.0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(grpo_objective(&[1.0], &[vec![0.0]], &[vec![0.0, 1.0]], 0.1).is_err());
        assert!(grpo_objective(&[1.0, 0.0], &[vec![0.0]], &[vec![0.0]], 0.1).is_err());
    }
}
