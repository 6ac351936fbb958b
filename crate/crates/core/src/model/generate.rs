//! Batched autoregressive generation over the recurrent representation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SrmError};
use crate::model::forward::MixerMatrices;
use crate::model::step::{GenerationState, SampleState};
use crate::model::ModelParams;
use crate::par;
use crate::real::Real;
use crate::recurrent::CacheMode;
use crate::sampling::{sample, SamplerSpec};
use crate::tokenizer;

/// How prompts are consumed before sampling starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrefillMode {
    /// Step the prompt token by token.
    #[default]
    Recurrent,
    /// Run the parallel form over the prompt, then rebuild the caches from it.
    Parallel,
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub max_new: usize,
    pub sampler: SamplerSpec,
    pub seed: u64,
    pub stop_token: Option<u32>,
    /// Substituted for an empty prompt.
    pub bos: u32,
    pub prefill: PrefillMode,
    pub cache_mode: CacheMode,
}

impl GenerateOptions {
    pub fn new(max_new: usize, sampler: SamplerSpec, seed: u64) -> Self {
        GenerateOptions {
            max_new,
            sampler,
            seed,
            stop_token: None,
            bos: tokenizer::BOS,
            prefill: PrefillMode::Recurrent,
            cache_mode: CacheMode::Full,
        }
    }
}

/// Emitted continuation of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Log-probability of each emitted token under the distribution it was
    /// sampled from.
    pub logprobs: Vec<f64>,
}

impl<T: Real> ModelParams<T> {
    /// Consume one prompt and return its caches and next-token logits.
    pub fn prefill(&self, prompt: &[u32], mode: PrefillMode, cache_mode: CacheMode) -> Result<(SampleState<T>, Vec<T>)> {
        if prompt.is_empty() {
            return Err(SrmError::Length {
                requested: 0,
                n_ctx: self.config.n_ctx,
            });
        }
        self.check_tokens(prompt)?;
        match mode {
            PrefillMode::Recurrent => {
                let mut state = GenerationState::new(&self.config, 1, cache_mode);
                let mut last = Vec::new();
                for &tok in prompt {
                    last = self.forward_recurrent_step(&[tok], &mut state)?.logits.into_vec();
                }
                Ok((state.samples.pop().expect("batch of one"), last))
            }
            PrefillMode::Parallel => {
                let mats = MixerMatrices::build(self, prompt.len())?;
                let trace = self.forward_trace(prompt, &mats)?;
                let mut state = self.state_from_trace(&trace);
                if cache_mode == CacheMode::EmulatedHalf {
                    for s in state.layers.iter_mut().flat_map(|l| l.heads.iter_mut()).flat_map(|h| h.states.iter_mut()) {
                        s.iter_mut().for_each(|v| *v = v.round_half());
                    }
                }
                Ok((state, trace.logits.row(prompt.len() - 1).to_vec()))
            }
        }
    }

    /// Sample `max_new` tokens after each prompt. Per-sample randomness comes
    /// from stream `i` of a ChaCha8 generator seeded with `seed`, so results do
    /// not depend on how the batch is scheduled.
    pub fn generate(&self, prompts: &[Vec<u32>], opts: &GenerateOptions) -> Result<Vec<Generation>> {
        let vocab = self.config.vocab_size;
        if opts.bos as usize >= vocab {
            return Err(SrmError::TokenOutOfRange { id: opts.bos, vocab_size: vocab });
        }
        let prompts: Vec<Vec<u32>> = prompts
            .iter()
            .map(|p| if p.is_empty() { vec![opts.bos] } else { p.clone() })
            .collect();
        for p in &prompts {
            if p.len() + opts.max_new > self.config.n_ctx {
                return Err(SrmError::Length {
                    requested: p.len() + opts.max_new,
                    n_ctx: self.config.n_ctx,
                });
            }
        }
        let prefilled = par::map_indexed(prompts.len(), |i| self.prefill(&prompts[i], opts.prefill, opts.cache_mode));
        let mut samples = Vec::with_capacity(prompts.len());
        let mut logits: Vec<Vec<f64>> = Vec::with_capacity(prompts.len());
        for r in prefilled {
            let (s, l) = r?;
            samples.push(s);
            logits.push(l.iter().map(|v| v.f64()).collect());
        }
        let mut state = GenerationState {
            samples,
            mode: opts.cache_mode,
        };
        let mut rngs: Vec<ChaCha8Rng> = (0..prompts.len())
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        let mut out = vec![
            Generation {
                tokens: Vec::with_capacity(opts.max_new),
                logprobs: Vec::with_capacity(opts.max_new),
            };
            prompts.len()
        ];
        if opts.max_new == 0 {
            return Ok(out);
        }
        loop {
            let mut next = vec![0u32; prompts.len()];
            for (i, s) in state.samples.iter_mut().enumerate() {
                if s.finished {
                    next[i] = s.last_token.unwrap_or(opts.bos);
                    continue;
                }
                let (tok, lp) = sample(&logits[i], &opts.sampler, &mut rngs[i]);
                out[i].tokens.push(tok);
                out[i].logprobs.push(lp);
                s.emitted += 1;
                next[i] = tok;
                if s.emitted >= opts.max_new || opts.stop_token == Some(tok) {
                    s.finished = true;
                }
            }
            if state.samples.iter().all(|s| s.finished) {
                return Ok(out);
            }
            let step = self.forward_recurrent_step(&next, &mut state)?;
            for (i, row) in logits.iter_mut().enumerate() {
                if !step.stale[i] {
                    for (dst, src) in row.iter_mut().zip(step.logits.row(i)) {
                        *dst = src.f64();
                    }
                }
            }
        }
    }
}
