//! Recurrent (constant memory) evaluation of a whole model, batched over
//! samples.

use std::collections::TryReserveError;

use crate::config::SrmConfig;
use crate::error::{Result, SrmError};
use crate::model::forward::{add_row_bias, copy_columns, gelu, rms_norm, ForwardTrace};
use crate::model::ModelParams;
use crate::par;
use crate::real::Real;
use crate::recurrent::{step_filter, CacheMode, LayerCache};
use crate::tensor::{gemm_nt, Matrix};

/// Recurrent state of one sample across all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleState<T> {
    pub layers: Vec<LayerCache<T>>,
    pub last_token: Option<u32>,
    pub emitted: usize,
    pub finished: bool,
}

impl<T: Real> SampleState<T> {
    pub fn new(config: &SrmConfig) -> Self {
        SampleState {
            layers: (0..config.n_layers).map(|_| LayerCache::new(config)).collect(),
            last_token: None,
            emitted: 0,
            finished: false,
        }
    }

    pub fn try_new(config: &SrmConfig) -> Result<Self, TryReserveError> {
        let mut layers = Vec::new();
        layers.try_reserve_exact(config.n_layers)?;
        for _ in 0..config.n_layers {
            layers.push(LayerCache::try_new(config)?);
        }
        Ok(SampleState {
            layers,
            last_token: None,
            emitted: 0,
            finished: false,
        })
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.layers.first().map_or(0, |l| l.position)
    }

    pub fn scalar_count(&self) -> usize {
        self.layers.iter().map(LayerCache::scalar_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationState<T> {
    pub samples: Vec<SampleState<T>>,
    pub mode: CacheMode,
}

impl<T: Real> GenerationState<T> {
    pub fn new(config: &SrmConfig, batch: usize, mode: CacheMode) -> Self {
        GenerationState {
            samples: (0..batch).map(|_| SampleState::new(config)).collect(),
            mode,
        }
    }

    /// Fallible allocation, used to probe the concurrency ceiling.
    pub fn try_new(config: &SrmConfig, batch: usize, mode: CacheMode) -> Result<Self, TryReserveError> {
        let mut samples = Vec::new();
        samples.try_reserve_exact(batch)?;
        for _ in 0..batch {
            samples.push(SampleState::try_new(config)?);
        }
        Ok(GenerationState { samples, mode })
    }

    pub fn batch(&self) -> usize {
        self.samples.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.samples.iter().map(SampleState::scalar_count).sum()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    /// `batch × vocab_size`; rows flagged stale are zero.
    pub logits: Matrix<T>,
    /// Samples that were already finished or hit the context limit and did
    /// not advance.
    pub stale: Vec<bool>,
}

/// Samples per parallel work unit when stepping a batch.
const MIN_STEP_CHUNK: usize = 16;

impl<T: Real> ModelParams<T> {
    /// Feed one token per sample and advance every live cache by one position.
    pub fn forward_recurrent_step(&self, tokens: &[u32], state: &mut GenerationState<T>) -> Result<StepOutput<T>> {
        if tokens.len() != state.samples.len() {
            return Err(SrmError::Dimension(format!(
                "{} tokens for a batch of {}",
                tokens.len(),
                state.samples.len()
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(SrmError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        let b = tokens.len();
        let vocab = self.config.vocab_size;
        let mode = state.mode;
        let chunk = b.div_ceil(par::workers()).max(MIN_STEP_CHUNK).max(1);
        let mut pieces: Vec<(&[u32], &mut [SampleState<T>])> =
            tokens.chunks(chunk).zip(state.samples.chunks_mut(chunk)).collect();
        let outs = par::map_mut(&mut pieces, |_, (toks, samples)| self.step_chunk(toks, samples, mode));
        let mut logits = Vec::with_capacity(b * vocab);
        let mut stale = Vec::with_capacity(b);
        for (l, s) in outs {
            logits.extend(l);
            stale.extend(s);
        }
        Ok(StepOutput {
            logits: Matrix::from_vec(b, vocab, logits)?,
            stale,
        })
    }

    fn step_chunk(&self, tokens: &[u32], samples: &mut [SampleState<T>], mode: CacheMode) -> (Vec<T>, Vec<bool>) {
        let cfg = &self.config;
        let (d, dh, ff, vocab) = (cfg.d_model, cfg.head_dim(), cfg.ff_dim(), cfg.vocab_size);
        let mut stale = vec![false; samples.len()];
        let mut active = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter_mut().enumerate() {
            if !s.finished && s.position() >= cfg.n_ctx {
                s.finished = true;
            }
            if s.finished {
                stale[i] = true;
            } else {
                active.push(i);
            }
        }
        let a = active.len();
        let mut x = Vec::with_capacity(a * d);
        for &i in &active {
            x.extend_from_slice(self.embedding.row(tokens[i] as usize));
        }

        let mut y = vec![T::zero(); dh];
        let mut outs = vec![vec![T::zero(); dh]; 2];
        for (l, layer) in self.layers.iter().enumerate() {
            let (u, _) = rms_norm(&x, &layer.mix_norm, d);
            let mut c = vec![T::zero(); a * d];
            for (h, head) in layer.heads.iter().enumerate() {
                let z = match layer.head_projection(h, dh) {
                    Some(w) => {
                        let mut z = vec![T::zero(); a * dh];
                        gemm_nt(&u, w, &mut z, a, dh, d, false);
                        z
                    }
                    None => copy_columns(&u, d, h * dh, dh),
                };
                let slot0 = h * head.mixers.len();
                for (row, &i) in active.iter().enumerate() {
                    let cache = &mut samples[i].layers[l];
                    let t = cache.position;
                    let zr = &z[row * dh..(row + 1) * dh];
                    for (m, mixer) in head.mixers.iter().enumerate() {
                        let out = &mut outs[m];
                        out.fill(T::zero());
                        let states = &mut cache.heads[slot0 + m].states;
                        for (f, (filter, st)) in mixer.filters.iter().zip(states.iter_mut()).enumerate() {
                            step_filter(filter, zr, f, st, t, f == 0, mode, out);
                        }
                    }
                    match head.combine {
                        Some([wa, wb]) => {
                            for r in 0..dh {
                                y[r] = wa * outs[0][r] + wb * outs[1][r];
                            }
                        }
                        None => y.copy_from_slice(&outs[0]),
                    }
                    c[row * d + h * dh..row * d + (h + 1) * dh].copy_from_slice(&y);
                }
            }
            for &i in &active {
                samples[i].layers[l].position += 1;
            }
            let mut x_mid = x;
            match &layer.out_proj {
                Some(p) => gemm_nt(&c, p.as_slice(), &mut x_mid, a, d, d, true),
                None => x_mid.iter_mut().zip(&c).for_each(|(v, cv)| *v += *cv),
            }
            let (v, _) = rms_norm(&x_mid, &layer.ff_norm, d);
            let mut h1 = vec![T::zero(); a * ff];
            gemm_nt(&v, layer.ff_in.as_slice(), &mut h1, a, ff, d, false);
            add_row_bias(&mut h1, &layer.ff_in_bias);
            for v in &mut h1 {
                *v = gelu(*v);
            }
            gemm_nt(&h1, layer.ff_out.as_slice(), &mut x_mid, a, d, ff, true);
            add_row_bias(&mut x_mid, &layer.ff_out_bias);
            x = x_mid;
        }
        let (xf, _) = rms_norm(&x, &self.final_norm, d);
        let mut act_logits = vec![T::zero(); a * vocab];
        gemm_nt(&xf, self.lm_head.as_slice(), &mut act_logits, a, vocab, d, false);

        let mut logits = vec![T::zero(); samples.len() * vocab];
        for (row, &i) in active.iter().enumerate() {
            logits[i * vocab..(i + 1) * vocab].copy_from_slice(&act_logits[row * vocab..(row + 1) * vocab]);
            samples[i].last_token = Some(tokens[i]);
        }
        (logits, stale)
    }

    /// Teacher-forced recurrent pass over one sequence; row `t` holds the
    /// logits after consuming `tokens[..=t]`.
    pub fn forward_recurrent_sequence(&self, tokens: &[u32], mode: CacheMode) -> Result<Matrix<T>> {
        self.check_tokens(tokens)?;
        let vocab = self.config.vocab_size;
        let mut state = GenerationState::new(&self.config, 1, mode);
        let mut out = Matrix::zeros(tokens.len(), vocab);
        for (t, &tok) in tokens.iter().enumerate() {
            let step = self.forward_recurrent_step(&[tok], &mut state)?;
            out.row_mut(t).copy_from_slice(step.logits.row(0));
        }
        Ok(out)
    }

    /// Rebuild the recurrent caches from a parallel forward pass over a
    /// prompt, as if the prompt had been stepped token by token.
    pub fn state_from_trace(&self, trace: &ForwardTrace<T>) -> SampleState<T> {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let n = trace.tokens.len();
        let mut state = SampleState::new(cfg);
        for (l, layer) in self.layers.iter().enumerate() {
            let cache = &mut state.layers[l];
            for (h, head) in layer.heads.iter().enumerate() {
                let z = &trace.layers[l].z[h];
                for (m, mixer) in head.mixers.iter().enumerate() {
                    let hc = &mut cache.heads[h * head.mixers.len() + m];
                    for (f, filter) in mixer.filters.iter().enumerate() {
                        let lambda = filter.lambda();
                        let s = &mut hc.states[f];
                        for t in 0..n {
                            let w = match filter.kind {
                                crate::mixing::MixerKind::RowRepeat => filter.alpha[t],
                                crate::mixing::MixerKind::ColumnRepeat => T::one(),
                            };
                            for r in 0..dh {
                                let xv = if r + f < dh { z[t * dh + r + f] } else { T::zero() };
                                s[r] = lambda * (s[r] + w * xv);
                            }
                        }
                    }
                }
            }
            cache.position = n;
        }
        state.last_token = trace.tokens.last().copied();
        state
    }
}
