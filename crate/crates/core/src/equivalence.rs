//! Seeded sweep comparing the parallel and recurrent forms of whole models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HeadMode, SrmConfig};
use crate::error::Result;
use crate::model::ModelParams;
use crate::par;
use crate::recurrent::CacheMode;
use crate::tensor::Matrix;

pub const F32_TOLERANCE: f64 = 1e-4;
pub const HALF_TOLERANCE: f64 = 5e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub seed: u64,
    pub config: SrmConfig,
    pub seq_len: usize,
    /// Largest logit difference with a full-precision cache.
    pub max_diff_full: f64,
    /// Largest logit difference with the emulated half-precision cache.
    pub max_diff_half: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub cases: Vec<CaseResult>,
    pub max_diff_full: f64,
    pub max_diff_half: f64,
    pub tolerance_full: f64,
    pub tolerance_half: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.max_diff_full <= self.tolerance_full && self.max_diff_half <= self.tolerance_half
    }
}

/// `seeds` configurations per (head mode, decay, projections, kernel size).
/// Widths, depths, head counts and lengths are drawn from `base_seed` with
/// `d ≤ max_d` and `n ≤ max_n`.
pub fn sweep_configs(base_seed: u64, seeds: u64, kernel_sizes: &[usize], max_d: usize, max_n: usize) -> Vec<(u64, SrmConfig, usize)> {
    let mut out = Vec::new();
    let mut case = 0u64;
    for mode in HeadMode::ALL {
        for decay in [true, false] {
            for proj in [true, false] {
                for &k in kernel_sizes {
                    for s in 0..seeds {
                        case += 1;
                        let seed = base_seed ^ case.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ s;
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let n_heads = if mode == HeadMode::Mixed {
                            [2, 4][rng.gen_range(0..2)]
                        } else {
                            [0, 1, 2, 4][rng.gen_range(0..4)]
                        };
                        let unit = n_heads.max(1) * k;
                        let d = unit * rng.gen_range(1..=(max_d / unit).max(1));
                        let n_ctx = rng.gen_range(2..=max_n);
                        let cfg = SrmConfig {
                            d_model: d,
                            n_layers: rng.gen_range(1..=2),
                            n_heads,
                            n_ctx,
                            vocab_size: 32,
                            head_mode: mode,
                            head_parallel: rng.gen_bool(0.5),
                            use_projections: proj,
                            decay_enabled: decay,
                            diag_const_enabled: rng.gen_bool(0.5),
                            kernel_size: k,
                            ff_expansion: 2,
                        };
                        let seq_len = rng.gen_range(1..=n_ctx);
                        out.push((seed, cfg, seq_len));
                    }
                }
            }
        }
    }
    out
}

fn jittered(cfg: &SrmConfig, seed: u64) -> Result<ModelParams<f32>> {
    let mut p = ModelParams::<f32>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // biases, norm gains and decay parameters start at constants; perturb
    // everything so no term of the recurrence is trivially zero or one
    for t in p.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += rng.gen_range(-0.2f32..0.2);
        }
    }
    Ok(p)
}

fn max_diff(a: &Matrix<f32>, b: &Matrix<f32>) -> f64 {
    f64::from(a.max_abs_diff(b))
}

/// Parallel logits against recurrent logits in both cache modes.
pub fn check_case(seed: u64, cfg: &SrmConfig, seq_len: usize) -> Result<CaseResult> {
    let params = jittered(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70c5);
    let tokens: Vec<u32> = (0..seq_len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
    let parallel = params.forward_parallel(std::slice::from_ref(&tokens))?.remove(0);
    let full = params.forward_recurrent_sequence(&tokens, CacheMode::Full)?;
    let half = params.forward_recurrent_sequence(&tokens, CacheMode::EmulatedHalf)?;
    Ok(CaseResult {
        seed,
        config: cfg.clone(),
        seq_len,
        max_diff_full: max_diff(&parallel, &full),
        max_diff_half: max_diff(&parallel, &half),
    })
}

pub fn run_sweep(cases: &[(u64, SrmConfig, usize)]) -> Result<EquivalenceReport> {
    let results = par::map_indexed(cases.len(), |i| check_case(cases[i].0, &cases[i].1, cases[i].2));
    let cases = results.into_iter().collect::<Result<Vec<_>>>()?;
    let fold = |f: fn(&CaseResult) -> f64| cases.iter().map(f).fold(0.0, f64::max);
    Ok(EquivalenceReport {
        max_diff_full: fold(|c| c.max_diff_full),
        max_diff_half: fold(|c| c.max_diff_half),
        tolerance_full: F32_TOLERANCE,
        tolerance_half: HALF_TOLERANCE,
        cases,
    })
}

/// The default sweep: 128 configurations with `d ≤ 64`, `n ≤ 64` and
/// kernel sizes one and four.
pub fn default_sweep(base_seed: u64) -> Vec<(u64, SrmConfig, usize)> {
    sweep_configs(base_seed, 4, &[1, 4], 64, 64)
}
