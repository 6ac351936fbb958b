//! Balanced resampling of a rollout pool into a training batch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrmError};

/// One generated completion with its reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub question_id: String,
    /// Prompt the completion was generated from.
    pub prompt: Vec<u32>,
    /// The completion `o_i`.
    pub tokens: Vec<u32>,
    /// Per-token log-probabilities under the sampling distribution.
    pub logprobs: Vec<f64>,
    /// `1.0` if verified correct, else `0.0`.
    pub reward: f64,
    pub group: usize,
}

impl RolloutRecord {
    pub fn is_good(&self) -> bool {
        self.reward > 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResampleSpec {
    /// Training batch size `b`.
    pub batch: usize,
    /// Rollouts per question `G`.
    pub group_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub records: Vec<RolloutRecord>,
    pub good: usize,
    /// Set when the pool was smaller than `b` and some records repeat.
    pub with_replacement: bool,
}

/// Take up to `⌊b/2⌋` good records, fill with bad ones, then top up with
/// whichever kind is left, all without replacement. Only a pool smaller than
/// `b` falls back to drawing with replacement.
pub fn balanced_resample(pool: &[RolloutRecord], spec: &ResampleSpec) -> Result<Resampled> {
    if pool.is_empty() {
        return Err(SrmError::Parameter("cannot resample an empty pool".into()));
    }
    if spec.batch < 2 {
        return Err(SrmError::config("batch", "balanced resampling needs b >= 2"));
    }
    let b = spec.batch;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut good: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].is_good()).collect();
    let mut bad: Vec<usize> = (0..pool.len()).filter(|&i| !pool[i].is_good()).collect();
    good.shuffle(&mut rng);
    bad.shuffle(&mut rng);

    let take_good = good.len().min(b / 2);
    let take_bad = bad.len().min(b - take_good);
    let extra_good = (good.len() - take_good).min(b - take_good - take_bad);
    let mut picked: Vec<usize> = Vec::with_capacity(b);
    picked.extend(&good[..take_good + extra_good]);
    picked.extend(&bad[..take_bad]);
    let with_replacement = picked.len() < b;
    while picked.len() < b {
        picked.push(rng.gen_range(0..pool.len()));
    }
    picked.shuffle(&mut rng);
    let records: Vec<RolloutRecord> = picked.iter().map(|&i| pool[i].clone()).collect();
    let good = records.iter().filter(|r| r.is_good()).count();
    Ok(Resampled {
        records,
        good,
        with_replacement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(good: usize, bad: usize) -> Vec<RolloutRecord> {
        (0..good + bad)
            .map(|i| RolloutRecord {
                question_id: format!("q{i}"),
                prompt: vec![],
                tokens: vec![i as u32],
                logprobs: vec![-0.5],
                reward: if i < good { 1.0 } else { 0.0 },
                group: 0,
            })
            .collect()
    }

    fn spec(b: usize) -> ResampleSpec {
        ResampleSpec {
            batch: b,
            group_size: 4,
            seed: 3,
        }
    }

    #[test]
    fn cap_then_fill() {
        let r = balanced_resample(&pool(7, 3), &spec(8)).unwrap();
        assert_eq!((r.records.len(), r.good), (8, 5));
        assert!(!r.with_replacement);
        let r = balanced_resample(&pool(0, 6), &spec(4)).unwrap();
        assert_eq!((r.records.len(), r.good), (4, 0));
        let r = balanced_resample(&pool(1, 9), &spec(6)).unwrap();
        assert_eq!((r.records.len(), r.good), (6, 1));
    }

    #[test]
    fn small_pool_is_flagged() {
        let r = balanced_resample(&pool(1, 1), &spec(5)).unwrap();
        assert_eq!(r.records.len(), 5);
        assert!(r.with_replacement);
        assert!(balanced_resample(&[], &spec(4)).is_err());
        assert!(balanced_resample(&pool(1, 1), &spec(1)).is_err());
    }

    #[test]
    fn no_record_repeats_without_replacement() {
        let r = balanced_resample(&pool(5, 5), &spec(10)).unwrap();
        let mut ids: Vec<u32> = r.records.iter().map(|x| x.tokens[0]).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }
}
