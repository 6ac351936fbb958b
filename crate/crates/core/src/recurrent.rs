//! Constant-memory recurrent evaluation of the structured mixers.
//!
//! Each mixer keeps one running sum `S` of `head_dim` scalars per kernel
//! filter. For a row-repeat mixer at position `t`
//!
//! ```text
//! y = α_t·x + β_t + S        S ← λ·(S + α_t·x)
//! ```
//!
//! and for a column-repeat mixer
//!
//! ```text
//! y = α_t·(x + S) + β_t      S ← λ·(S + x)
//! ```
//!
//! The output is always read before the state is updated, so `S` never
//! contains the current token.

use std::collections::TryReserveError;

use crate::config::SrmConfig;
use crate::error::{Result, SrmError};
use crate::mixing::{KernelMixerParams, MixerHeadParams, MixerKind};
use crate::real::Real;

/// Numeric treatment of cached state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CacheMode {
    #[default]
    Full,
    /// State and decay are rounded to binary16-representable values after
    /// every update, emulating a half-precision cache.
    EmulatedHalf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache<T> {
    /// One running sum per kernel filter.
    pub states: Vec<Vec<T>>,
}

impl<T: Real> HeadCache<T> {
    pub fn new(head_dim: usize, kernel_size: usize) -> Self {
        HeadCache {
            states: vec![vec![T::zero(); head_dim]; kernel_size],
        }
    }

    pub fn try_new(head_dim: usize, kernel_size: usize) -> Result<Self, TryReserveError> {
        let mut states = Vec::new();
        states.try_reserve_exact(kernel_size)?;
        for _ in 0..kernel_size {
            let mut s = Vec::new();
            s.try_reserve_exact(head_dim)?;
            s.resize(head_dim, T::zero());
            states.push(s);
        }
        Ok(HeadCache { states })
    }

    pub fn scalar_count(&self) -> usize {
        self.states.iter().map(Vec::len).sum()
    }

    pub fn reset(&mut self) {
        for s in &mut self.states {
            s.fill(T::zero());
        }
    }
}

/// Recurrent state of one layer for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T> {
    /// One entry per mixer, head-major (a combined head contributes its row
    /// mixer then its column mixer).
    pub heads: Vec<HeadCache<T>>,
    /// Tokens consumed so far.
    pub position: usize,
}

impl<T: Real> LayerCache<T> {
    pub fn new(config: &SrmConfig) -> Self {
        let mixers = config.heads() * config.mixers_per_head();
        LayerCache {
            heads: (0..mixers)
                .map(|_| HeadCache::new(config.head_dim(), config.kernel_size))
                .collect(),
            position: 0,
        }
    }

    pub fn try_new(config: &SrmConfig) -> Result<Self, TryReserveError> {
        let mixers = config.heads() * config.mixers_per_head();
        let mut heads = Vec::new();
        heads.try_reserve_exact(mixers)?;
        for _ in 0..mixers {
            heads.push(HeadCache::try_new(config.head_dim(), config.kernel_size)?);
        }
        Ok(LayerCache { heads, position: 0 })
    }

    pub fn scalar_count(&self) -> usize {
        self.heads.iter().map(HeadCache::scalar_count).sum()
    }
}

/// Fresh zeroed caches for one layer across a batch.
pub fn init_cache<T: Real>(config: &SrmConfig, batch: usize) -> Vec<LayerCache<T>> {
    (0..batch).map(|_| LayerCache::new(config)).collect()
}

fn check_position(t: usize, n_ctx: usize) -> Result<()> {
    if t >= n_ctx {
        return Err(SrmError::ContextOverflow { position: t, n_ctx });
    }
    Ok(())
}

/// Advance one filter by one token, adding its output into `out`.
///
/// `x` is the full head input; the filter reads `x[shift..]` padded with
/// zeros, which is how kernel filter `shift` sees the hidden dimension.
#[inline]
pub(crate) fn step_filter<T: Real>(
    params: &MixerHeadParams<T>,
    x: &[T],
    shift: usize,
    state: &mut [T],
    t: usize,
    with_bias: bool,
    mode: CacheMode,
    out: &mut [T],
) {
    let dh = params.head_dim;
    let live = dh.saturating_sub(shift);
    let alpha = params.alpha[t];
    let diag = params.diag_scale();
    let mut lambda = params.lambda();
    if mode == CacheMode::EmulatedHalf {
        lambda = lambda.round_half();
    }
    let xs = &x[shift.min(dh)..];
    if with_bias {
        for (o, b) in out.iter_mut().zip(params.bias_column(t)) {
            *o += *b;
        }
    }
    match params.kind {
        MixerKind::RowRepeat => {
            let a_diag = diag * alpha;
            for r in 0..live {
                out[r] += a_diag * xs[r] + state[r];
                state[r] = lambda * (state[r] + alpha * xs[r]);
            }
            for r in live..dh {
                out[r] += state[r];
                state[r] = lambda * state[r];
            }
        }
        MixerKind::ColumnRepeat => {
            for r in 0..live {
                out[r] += alpha * (diag * xs[r] + state[r]);
                state[r] = lambda * (state[r] + xs[r]);
            }
            for r in live..dh {
                out[r] += alpha * state[r];
                state[r] = lambda * state[r];
            }
        }
    }
    if mode == CacheMode::EmulatedHalf {
        for s in state.iter_mut() {
            *s = s.round_half();
        }
    }
}

/// Row-repeat recurrent step at position `t`, using the cache's first state.
pub fn step_row<T: Real>(x: &[T], cache: &mut HeadCache<T>, params: &MixerHeadParams<T>, t: usize) -> Result<Vec<T>> {
    step_single(x, cache, params, t, MixerKind::RowRepeat)
}

/// Column-repeat recurrent step at position `t`, using the cache's first
/// state.
pub fn step_col<T: Real>(x: &[T], cache: &mut HeadCache<T>, params: &MixerHeadParams<T>, t: usize) -> Result<Vec<T>> {
    step_single(x, cache, params, t, MixerKind::ColumnRepeat)
}

fn step_single<T: Real>(
    x: &[T],
    cache: &mut HeadCache<T>,
    params: &MixerHeadParams<T>,
    t: usize,
    kind: MixerKind,
) -> Result<Vec<T>> {
    if params.kind != kind {
        return Err(SrmError::Parameter(format!(
            "{kind:?} step applied to a {:?} mixer",
            params.kind
        )));
    }
    check_len(x, params.head_dim)?;
    check_position(t, params.n_ctx())?;
    let mut out = vec![T::zero(); params.head_dim];
    step_filter(params, x, 0, &mut cache.states[0], t, true, CacheMode::Full, &mut out);
    Ok(out)
}

/// Kernelized recurrent step: every filter advances on its shifted slice and
/// the outputs are summed.
pub fn step_kernel<T: Real>(
    x: &[T],
    cache: &mut HeadCache<T>,
    kparams: &KernelMixerParams<T>,
    t: usize,
) -> Result<Vec<T>> {
    step_kernel_with_mode(x, cache, kparams, t, CacheMode::Full)
}

pub fn step_kernel_with_mode<T: Real>(
    x: &[T],
    cache: &mut HeadCache<T>,
    kparams: &KernelMixerParams<T>,
    t: usize,
    mode: CacheMode,
) -> Result<Vec<T>> {
    check_len(x, kparams.head_dim())?;
    check_position(t, kparams.n_ctx())?;
    if cache.states.len() != kparams.kernel_size() {
        return Err(SrmError::Dimension(format!(
            "cache holds {} states for a kernel of size {}",
            cache.states.len(),
            kparams.kernel_size()
        )));
    }
    let mut out = vec![T::zero(); kparams.head_dim()];
    for (i, (filter, state)) in kparams.filters.iter().zip(&mut cache.states).enumerate() {
        step_filter(filter, x, i, state, t, i == 0, mode, &mut out);
    }
    Ok(out)
}

fn check_len<T>(x: &[T], head_dim: usize) -> Result<()> {
    if x.len() != head_dim {
        return Err(SrmError::Dimension(format!(
            "input has length {} but head_dim is {head_dim}",
            x.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HeadMode;
    use crate::tensor::Matrix;

    fn mixer(kind: MixerKind, alpha: Vec<f64>, decay: bool) -> MixerHeadParams<f64> {
        let mut p = MixerHeadParams::zeros(kind, alpha.len(), 2, decay, false);
        p.alpha = alpha;
        p
    }

    #[test]
    fn cache_sizes() {
        let c = SrmConfig::mixed(8, 1, 2, 16);
        let caches = init_cache::<f32>(&c, 3);
        assert_eq!(caches.iter().map(LayerCache::scalar_count).sum::<usize>(), 24);
        assert!(caches.iter().all(|l| l.position == 0 && l.heads.len() == 2));

        let mut c = SrmConfig::mixed(8, 1, 2, 16);
        c.head_mode = HeadMode::Combined;
        assert_eq!(LayerCache::<f32>::new(&c).scalar_count(), 16);

        assert_eq!(HeadCache::<f32>::new(8, 4).scalar_count(), 32);
        assert_eq!(HeadCache::<f32>::try_new(8, 4).unwrap(), HeadCache::new(8, 4));
    }

    #[test]
    fn first_row_step_uses_empty_sum() {
        let mut p = mixer(MixerKind::RowRepeat, vec![0.5, 2.0], true);
        p.bias = Matrix::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut cache = HeadCache::new(2, 1);
        let y = step_row(&[1.0, -2.0], &mut cache, &p, 0).unwrap();
        assert_eq!(y, vec![0.5 + 0.1, -1.0 + 0.2]);
        let l = p.lambda();
        assert_eq!(cache.states[0], vec![l * 0.5, -l]);
    }

    #[test]
    fn undecayed_steps_are_prefix_sums() {
        let p = mixer(MixerKind::RowRepeat, vec![1.0, 1.0], false);
        let mut cache = HeadCache::new(2, 1);
        step_row(&[1.0, 2.0], &mut cache, &p, 0).unwrap();
        let y = step_row(&[10.0, 20.0], &mut cache, &p, 1).unwrap();
        assert_eq!(y, vec![11.0, 22.0]);

        let p = mixer(MixerKind::ColumnRepeat, vec![3.0, 3.0], false);
        let mut cache = HeadCache::new(2, 1);
        let y0 = step_col(&[1.0, 2.0], &mut cache, &p, 0).unwrap();
        assert_eq!(y0, vec![3.0, 6.0]);
        let y = step_col(&[10.0, 20.0], &mut cache, &p, 1).unwrap();
        assert_eq!(y, vec![33.0, 66.0]);
    }

    #[test]
    fn overflow_and_kind_errors() {
        let p = mixer(MixerKind::RowRepeat, vec![1.0, 1.0], true);
        let mut cache = HeadCache::new(2, 1);
        assert!(matches!(
            step_row(&[0.0, 0.0], &mut cache, &p, 2),
            Err(SrmError::ContextOverflow { position: 2, n_ctx: 2 })
        ));
        assert!(step_col(&[0.0, 0.0], &mut cache, &p, 0).is_err());
        assert!(step_row(&[0.0], &mut cache, &p, 0).is_err());
    }

    #[test]
    fn zero_input_kernel_keeps_zero_state() {
        let mut f0 = mixer(MixerKind::ColumnRepeat, vec![0.7; 3], true);
        f0.bias = Matrix::from_fn(3, 2, |j, r| (j + r) as f64);
        let f1 = mixer(MixerKind::ColumnRepeat, vec![-0.2; 3], true);
        let k = KernelMixerParams::new(vec![f0, f1]).unwrap();
        let mut cache = HeadCache::new(2, 2);
        for t in 0..3 {
            let y = step_kernel(&[0.0, 0.0], &mut cache, &k, t).unwrap();
            assert_eq!(y, vec![t as f64, t as f64 + 1.0]);
            assert!(cache.states.iter().flatten().all(|v| *v == 0.0));
        }
    }
}
