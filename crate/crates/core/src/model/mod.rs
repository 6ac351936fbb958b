//! Full SRM language model: embeddings, pre-norm residual blocks with headed
//! structured mixing and a feedforward, and an untied LM head.
//!
//! One parameter set serves both representations: [`forward`] runs the dense
//! sequence-parallel form (and its gradient), [`step`] runs the constant
//! memory recurrent form.

pub mod forward;
pub mod generate;
pub mod step;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{HeadMode, SrmConfig};
use crate::error::{Result, SrmError};
use crate::mixing::{KernelMixerParams, MixerHeadParams, DECAY_RAW_INIT};
use crate::real::Real;
use crate::tensor::Matrix;

pub use forward::{ForwardTrace, MixerMatrices};
pub use generate::{GenerateOptions, Generation, PrefillMode};
pub use step::{GenerationState, SampleState, StepOutput};

// Shared by `tensors` and `tensors_mut`; the trailing tokens are the
// mutability of every borrow.
macro_rules! visit_tensors {
    ($model:expr, $out:ident, $view:ident, $slice:ident, $from_ref:path, $($m:tt)?) => {{
        macro_rules! push {
            ($name:expr, $shape:expr, $data:expr) => {{
                let shape = $shape;
                $out.push($view { name: $name, shape, data: $data })
            }};
        }
        push!("embedding".to_string(), vec![$model.embedding.rows(), $model.embedding.cols()], $model.embedding.$slice());
        for (l, layer) in (& $($m)? $model.layers).into_iter().enumerate() {
            let p = format!("layers.{l}");
            push!(format!("{p}.mix_norm"), vec![layer.mix_norm.len()], & $($m)? layer.mix_norm[..]);
            match & $($m)? layer.in_proj {
                InputProjection::None => {}
                InputProjection::Shared(w) => push!(format!("{p}.in_proj"), vec![w.rows(), w.cols()], w.$slice()),
                InputProjection::PerHead(ws) => {
                    for (h, w) in ws.into_iter().enumerate() {
                        push!(format!("{p}.heads.{h}.in_proj"), vec![w.rows(), w.cols()], w.$slice());
                    }
                }
            }
            for (h, head) in (& $($m)? layer.heads).into_iter().enumerate() {
                for (mi, mixer) in (& $($m)? head.mixers).into_iter().enumerate() {
                    for (fi, filter) in (& $($m)? mixer.filters).into_iter().enumerate() {
                        let fp = format!("{p}.heads.{h}.mixers.{mi}.filters.{fi}");
                        push!(format!("{fp}.alpha"), vec![filter.alpha.len()], & $($m)? filter.alpha[..]);
                        if filter.decay_enabled {
                            push!(format!("{fp}.decay_raw"), vec![1], $from_ref(& $($m)? filter.decay_raw));
                        }
                        if let Some(c) = & $($m)? filter.diag_const {
                            push!(format!("{fp}.diag_const"), vec![1], $from_ref(c));
                        }
                        if fi == 0 {
                            push!(format!("{fp}.bias"), vec![filter.bias.rows(), filter.bias.cols()], filter.bias.$slice());
                        }
                    }
                }
                if let Some(c) = & $($m)? head.combine {
                    push!(format!("{p}.heads.{h}.combine"), vec![2], & $($m)? c[..]);
                }
            }
            if let Some(w) = & $($m)? layer.out_proj {
                push!(format!("{p}.out_proj"), vec![w.rows(), w.cols()], w.$slice());
            }
            push!(format!("{p}.ff_norm"), vec![layer.ff_norm.len()], & $($m)? layer.ff_norm[..]);
            push!(format!("{p}.ff_in"), vec![layer.ff_in.rows(), layer.ff_in.cols()], layer.ff_in.$slice());
            push!(format!("{p}.ff_in_bias"), vec![layer.ff_in_bias.len()], & $($m)? layer.ff_in_bias[..]);
            push!(format!("{p}.ff_out"), vec![layer.ff_out.rows(), layer.ff_out.cols()], layer.ff_out.$slice());
            push!(format!("{p}.ff_out_bias"), vec![layer.ff_out_bias.len()], & $($m)? layer.ff_out_bias[..]);
        }
        push!("final_norm".to_string(), vec![$model.final_norm.len()], & $($m)? $model.final_norm[..]);
        push!("lm_head".to_string(), vec![$model.lm_head.rows(), $model.lm_head.cols()], $model.lm_head.$slice());
    }};
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputProjection<T> {
    /// Heads read slices of the normalized input directly.
    None,
    /// One `d × d` projection whose row blocks feed the heads.
    Shared(Matrix<T>),
    /// One `d_h × d` projection per head.
    PerHead(Vec<Matrix<T>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// One mixer, or a row then a column mixer for combined heads.
    pub mixers: Vec<KernelMixerParams<T>>,
    /// Combination weights `(a, b)` for `a·y_row + b·y_col`.
    pub combine: Option<[T; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub mix_norm: Vec<T>,
    pub in_proj: InputProjection<T>,
    pub heads: Vec<HeadParams<T>>,
    pub out_proj: Option<Matrix<T>>,
    pub ff_norm: Vec<T>,
    pub ff_in: Matrix<T>,
    pub ff_in_bias: Vec<T>,
    pub ff_out: Matrix<T>,
    pub ff_out_bias: Vec<T>,
}

impl<T: Real> LayerParams<T> {
    /// Rows of the input projection feeding head `h`, if projections exist.
    pub(crate) fn head_projection(&self, h: usize, head_dim: usize) -> Option<&[T]> {
        let d = self.mix_norm.len();
        match &self.in_proj {
            InputProjection::None => None,
            InputProjection::Shared(m) => Some(&m.as_slice()[h * head_dim * d..(h + 1) * head_dim * d]),
            InputProjection::PerHead(ms) => Some(ms[h].as_slice()),
        }
    }

    pub(crate) fn head_projection_mut(&mut self, h: usize, head_dim: usize) -> Option<&mut [T]> {
        let d = self.mix_norm.len();
        match &mut self.in_proj {
            InputProjection::None => None,
            InputProjection::Shared(m) => Some(&mut m.as_mut_slice()[h * head_dim * d..(h + 1) * head_dim * d]),
            InputProjection::PerHead(ms) => Some(ms[h].as_mut_slice()),
        }
    }
}

/// Every trainable tensor of a model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: SrmConfig,
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Matrix<T>,
}

/// Read-only view of one named tensor.
pub struct TensorView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct TensorViewMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

impl<T: Real> ModelParams<T> {
    /// All-zero parameters with the layout implied by `config`.
    pub fn zeros(config: &SrmConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let dh = config.head_dim();
        let f = config.ff_dim();
        let layers = (0..config.n_layers)
            .map(|_| {
                let heads = (0..config.heads())
                    .map(|h| HeadParams {
                        mixers: config
                            .head_kinds(h)
                            .iter()
                            .map(|&kind| KernelMixerParams {
                                filters: (0..config.kernel_size)
                                    .map(|_| {
                                        MixerHeadParams::zeros(
                                            kind,
                                            config.n_ctx,
                                            dh,
                                            config.decay_enabled,
                                            config.diag_const_enabled,
                                        )
                                    })
                                    .collect(),
                            })
                            .collect(),
                        combine: (config.head_mode == HeadMode::Combined).then_some([T::zero(); 2]),
                    })
                    .collect();
                let in_proj = match (config.use_projections, config.head_parallel) {
                    (false, _) => InputProjection::None,
                    (true, true) => InputProjection::Shared(Matrix::zeros(d, d)),
                    (true, false) => {
                        InputProjection::PerHead((0..config.heads()).map(|_| Matrix::zeros(dh, d)).collect())
                    }
                };
                LayerParams {
                    mix_norm: vec![T::zero(); d],
                    in_proj,
                    heads,
                    out_proj: config.use_projections.then(|| Matrix::zeros(d, d)),
                    ff_norm: vec![T::zero(); d],
                    ff_in: Matrix::zeros(f, d),
                    ff_in_bias: vec![T::zero(); f],
                    ff_out: Matrix::zeros(d, f),
                    ff_out_bias: vec![T::zero(); d],
                }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            embedding: Matrix::zeros(config.vocab_size, d),
            layers,
            final_norm: vec![T::zero(); d],
            lm_head: Matrix::zeros(config.vocab_size, d),
        })
    }

    /// Seeded initialization: weights uniform in `±1/√fan_in`, `α` uniform in
    /// `±1/√n_ctx`, biases zero, norm gains one, combination weights `0.5`,
    /// diagonal constants one and `θ = 2`.
    pub fn init(config: &SrmConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |data: &mut [T], bound: f64| {
            for v in data {
                *v = T::of(rng.gen_range(-bound..bound));
            }
        };
        let d = config.d_model as f64;
        let inv_sqrt = |fan_in: f64| 1.0 / fan_in.sqrt();
        uniform(p.embedding.as_mut_slice(), inv_sqrt(d));
        for layer in &mut p.layers {
            layer.mix_norm.fill(T::one());
            layer.ff_norm.fill(T::one());
            match &mut layer.in_proj {
                InputProjection::None => {}
                InputProjection::Shared(m) => uniform(m.as_mut_slice(), inv_sqrt(d)),
                InputProjection::PerHead(ms) => {
                    for m in ms {
                        uniform(m.as_mut_slice(), inv_sqrt(d));
                    }
                }
            }
            for head in &mut layer.heads {
                for mixer in &mut head.mixers {
                    for filter in &mut mixer.filters {
                        uniform(&mut filter.alpha, inv_sqrt(config.n_ctx as f64));
                        filter.decay_raw = if config.decay_enabled {
                            T::of(DECAY_RAW_INIT)
                        } else {
                            T::zero()
                        };
                        if let Some(c) = filter.diag_const.as_mut() {
                            *c = T::one();
                        }
                    }
                }
                if let Some(c) = head.combine.as_mut() {
                    *c = [T::of(0.5); 2];
                }
            }
            if let Some(m) = layer.out_proj.as_mut() {
                uniform(m.as_mut_slice(), inv_sqrt(d));
            }
            uniform(layer.ff_in.as_mut_slice(), inv_sqrt(d));
            uniform(layer.ff_out.as_mut_slice(), inv_sqrt(config.ff_dim() as f64));
        }
        p.final_norm.fill(T::one());
        uniform(p.lm_head.as_mut_slice(), inv_sqrt(d));
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config was validated at construction")
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config).expect("validated config");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = U::of(s.f64());
            }
        }
        out
    }

    /// Named trainable tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<TensorView<'_, T>> {
        let mut out = Vec::new();
        visit_tensors!(self, out, TensorView, as_slice, std::slice::from_ref,);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_, T>> {
        let mut out = Vec::new();
        visit_tensors!(self, out, TensorViewMut, as_mut_slice, std::slice::from_mut, mut);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name)
    }

    pub fn l2_norm(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(T::zero(), |acc, v| acc + *v * *v)
            .sqrt()
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * *s;
            }
        }
    }

    /// Decay constant of every filter, layer-major.
    pub fn lambdas(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.heads.iter())
            .flat_map(|h| h.mixers.iter())
            .flat_map(|m| m.filters.iter())
            .map(|f| f.lambda())
            .collect()
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.n_ctx {
            return Err(SrmError::Length {
                requested: tokens.len(),
                n_ctx: self.config.n_ctx,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(SrmError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }
}
