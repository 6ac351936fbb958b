//! Memory accounting and decode throughput measurement.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::SrmConfig;
use crate::error::{Result, SrmError};
use crate::model::{GenerationState, ModelParams};
use crate::par;
use crate::real::Real;
use crate::recurrent::CacheMode;
use crate::sampling::argmax;
use crate::tokenizer;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const WARMUP_STEPS: usize = 10;

/// Recurrent cache size next to what a key/value attention cache of the same
/// width, depth and context would need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheBytes {
    pub srm: u64,
    pub attention: u64,
}

pub fn cache_bytes(config: &SrmConfig, batch: usize, bytes_per_scalar: usize) -> CacheBytes {
    let b = batch as u64;
    let s = bytes_per_scalar as u64;
    CacheBytes {
        srm: b * config.cache_scalars_per_sample() as u64 * s,
        attention: b * config.n_layers as u64 * config.d_model as u64 * config.n_ctx as u64 * 2 * s,
    }
}

/// Tokens a `d_model`-wide state could hold losslessly:
/// `⌊d · bytes_per_param · tokens_per_byte · compression_ratio⌋`.
pub fn compression_capacity(d_model: usize, bytes_per_param: f64, tokens_per_byte: f64, compression_ratio: f64) -> Result<u64> {
    for (field, v) in [
        ("bytes_per_param", bytes_per_param),
        ("tokens_per_byte", tokens_per_byte),
        ("compression_ratio", compression_ratio),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(SrmError::config(field, format!("{v} is not a positive number")));
        }
    }
    if d_model == 0 {
        return Err(SrmError::config("d_model", "must be positive"));
    }
    Ok((d_model as f64 * bytes_per_param * tokens_per_byte * compression_ratio).floor() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Step the model only; the fed token never changes.
    LogitsOnly,
    /// Pick each sample's next token by argmax, as greedy decoding does.
    Argmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub config: SrmConfig,
    pub mode: DecodeMode,
    pub batch_size: usize,
    pub workers: usize,
    pub warmup_steps: usize,
    pub steps_measured: usize,
    /// Decode phase only.
    pub tokens_per_second: f64,
    pub p50_step_ms: f64,
    pub p95_step_ms: f64,
    pub prefill_seconds: f64,
    pub cache_bytes_per_sample: u64,
    pub peak_rss_bytes: Option<u64>,
    /// Set when the caches for this batch could not be allocated; the row
    /// then carries no timings.
    pub allocation_failed: bool,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub batch_sizes: Vec<usize>,
    pub gen_len: usize,
    pub modes: Vec<DecodeMode>,
    /// Refuse batches whose caches would exceed this many bytes.
    pub memory_budget: Option<u64>,
}

/// Peak resident set size of this process, where the platform reports it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(samples: &[Duration], q: f64) -> Duration {
    if samples.is_empty() {
        return Duration::ZERO;
    }
    let mut s = samples.to_vec();
    s.sort();
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Greedy-decode throughput for each batch size, largest first.
///
/// Every sample starts from BOS. Ten warm-up steps are discarded, then
/// `gen_len` steps are timed one by one. A batch whose caches cannot be
/// allocated is reported as such and the run moves on to smaller batches.
pub fn bench_decode<T: Real>(model: &ModelParams<T>, opts: &BenchOptions) -> Result<Vec<BenchReport>> {
    if opts.gen_len == 0 {
        return Ok(Vec::new());
    }
    let cfg = &model.config;
    let needed = 1 + WARMUP_STEPS + opts.gen_len;
    if needed > cfg.n_ctx {
        return Err(SrmError::Length {
            requested: needed,
            n_ctx: cfg.n_ctx,
        });
    }
    let per_sample = cache_bytes(cfg, 1, std::mem::size_of::<T>()).srm;
    let mut sizes = opts.batch_sizes.clone();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes.dedup();
    let mut reports = Vec::new();
    for &batch in &sizes {
        for &mode in &opts.modes {
            let mut report = BenchReport {
                schema_version: REPORT_SCHEMA_VERSION,
                config: cfg.clone(),
                mode,
                batch_size: batch,
                workers: par::workers(),
                warmup_steps: WARMUP_STEPS,
                steps_measured: 0,
                tokens_per_second: 0.0,
                p50_step_ms: 0.0,
                p95_step_ms: 0.0,
                prefill_seconds: 0.0,
                cache_bytes_per_sample: per_sample,
                peak_rss_bytes: None,
                allocation_failed: false,
            };
            let over_budget = opts.memory_budget.is_some_and(|m| per_sample.saturating_mul(batch as u64) > m);
            let state = if over_budget {
                None
            } else {
                GenerationState::<T>::try_new(cfg, batch, CacheMode::Full).ok()
            };
            let Some(mut state) = state else {
                report.allocation_failed = true;
                reports.push(report);
                continue;
            };
            let mut tokens = vec![tokenizer::BOS.min(cfg.vocab_size as u32 - 1); batch];
            let start = Instant::now();
            let mut out = model.forward_recurrent_step(&tokens, &mut state)?;
            report.prefill_seconds = start.elapsed().as_secs_f64();
            let mut times = Vec::with_capacity(opts.gen_len);
            for s in 0..WARMUP_STEPS + opts.gen_len {
                let t0 = Instant::now();
                if mode == DecodeMode::Argmax {
                    for (i, tok) in tokens.iter_mut().enumerate() {
                        let row: Vec<f64> = out.logits.row(i).iter().map(|v| v.f64()).collect();
                        *tok = argmax(&row);
                    }
                }
                out = model.forward_recurrent_step(&tokens, &mut state)?;
                if s >= WARMUP_STEPS {
                    times.push(t0.elapsed());
                }
            }
            let total: Duration = times.iter().sum();
            report.steps_measured = times.len();
            report.tokens_per_second = (batch * times.len()) as f64 / total.as_secs_f64().max(f64::MIN_POSITIVE);
            report.p50_step_ms = ms(percentile(&times, 0.5));
            report.p95_step_ms = ms(percentile(&times, 0.95));
            report.peak_rss_bytes = peak_rss_bytes();
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Median wall time of the decode step at token index `index`, measured from
/// `reps` copies of the same state, and the cache scalar count at that
/// point.
pub fn step_latency_at<T: Real>(model: &ModelParams<T>, batch: usize, index: usize, reps: usize) -> Result<(Duration, usize)> {
    let cfg = &model.config;
    if index >= cfg.n_ctx {
        return Err(SrmError::ContextOverflow {
            position: index,
            n_ctx: cfg.n_ctx,
        });
    }
    let tokens: Vec<u32> = (0..batch as u32).map(|i| i % cfg.vocab_size as u32).collect();
    let mut state = GenerationState::<T>::new(cfg, batch, CacheMode::Full);
    for _ in 0..index {
        model.forward_recurrent_step(&tokens, &mut state)?;
    }
    let scalars = state.scalar_count();
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut s = state.clone();
        let t0 = Instant::now();
        model.forward_recurrent_step(&tokens, &mut s)?;
        times.push(t0.elapsed());
    }
    Ok((percentile(&times, 0.5), scalars))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let d: Vec<Duration> = (1..=100).map(Duration::from_millis).collect();
        assert_eq!(percentile(&d, 0.5), Duration::from_millis(50));
        assert_eq!(percentile(&d, 0.95), Duration::from_millis(95));
        assert_eq!(percentile(&[], 0.5), Duration::ZERO);
    }

    #[test]
    fn capacity_rejects_nonpositive_factors() {
        assert!(compression_capacity(0, 2.0, 0.5, 14.8).is_err());
        assert!(compression_capacity(8, -1.0, 0.5, 14.8).is_err());
        assert!(compression_capacity(8, 1.0, f64::NAN, 14.8).is_err());
    }
}
