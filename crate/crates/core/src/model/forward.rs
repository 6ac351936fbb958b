//! Sequence-parallel forward pass and its reverse-mode gradient.
//!
//! Activations are token-major (`n × width`, one row per position). Mixing
//! matrices are materialized once per call and shared by every sample.

use crate::error::Result;
use crate::mixing::{build_structured_matrix, mix_tokens_backward, mix_tokens_forward};
use crate::model::ModelParams;
use crate::par;
use crate::real::Real;
use crate::tensor::{axpy, gemm_nn_acc, gemm_nt, gemm_tn_acc, Matrix};

const RMS_EPS: f64 = 1e-6;
/// Fixed number of partial gradients reduced per batch. Keeping it independent
/// of the thread count makes gradients bit-identical with and without rayon.
const GRAD_CHUNKS: usize = 8;

/// Dense mixing matrices, indexed `[layer][head][mixer][filter]`.
#[derive(Debug, Clone)]
pub struct MixerMatrices<T> {
    n: usize,
    mats: Vec<Vec<Vec<Vec<Matrix<T>>>>>,
}

impl<T: Real> MixerMatrices<T> {
    pub fn build(params: &ModelParams<T>, n: usize) -> Result<Self> {
        let mats = params
            .layers
            .iter()
            .map(|layer| {
                layer
                    .heads
                    .iter()
                    .map(|head| {
                        head.mixers
                            .iter()
                            .map(|mixer| {
                                mixer
                                    .filters
                                    .iter()
                                    .map(|f| build_structured_matrix(f, n))
                                    .collect::<Result<Vec<_>>>()
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixerMatrices { n, mats })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerTrace<T> {
    pub(crate) x_in: Vec<T>,
    inv1: Vec<T>,
    u: Vec<T>,
    /// Mixer input per head, `n × d_h`.
    pub(crate) z: Vec<Vec<T>>,
    /// Per-mixer outputs, kept only for combined heads.
    mixer_out: Vec<Vec<Vec<T>>>,
    c: Vec<T>,
    x_mid: Vec<T>,
    inv2: Vec<T>,
    v: Vec<T>,
    h1: Vec<T>,
    a1: Vec<T>,
}

/// Saved activations of one sample, enough to run the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub tokens: Vec<u32>,
    pub(crate) layers: Vec<LayerTrace<T>>,
    x_out: Vec<T>,
    inv_f: Vec<T>,
    xf: Vec<T>,
    /// `n × vocab_size`.
    pub logits: Matrix<T>,
}

pub(crate) fn rms_norm<T: Real>(x: &[T], gain: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let n = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(n);
    let dn = T::of(d as f64);
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let ms = row.iter().fold(T::zero(), |a, v| a + *v * *v) / dn;
        let r = T::one() / (ms + T::of(RMS_EPS)).sqrt();
        inv.push(r);
        for ((o, v), g) in out[t * d..(t + 1) * d].iter_mut().zip(row).zip(gain) {
            *o = *v * r * *g;
        }
    }
    (out, inv)
}

/// Accumulates `∂L/∂x` into `dx` and `∂L/∂gain` into `dgain`.
fn rms_norm_backward<T: Real>(dy: &[T], x: &[T], inv: &[T], gain: &[T], d: usize, dx: &mut [T], dgain: &mut [T]) {
    let dn = T::of(d as f64);
    for (t, &r) in inv.iter().enumerate() {
        let row = &x[t * d..(t + 1) * d];
        let dyr = &dy[t * d..(t + 1) * d];
        let mut proj = T::zero();
        for i in 0..d {
            proj += dyr[i] * gain[i] * row[i];
            dgain[i] += dyr[i] * row[i] * r;
        }
        let k = proj * r * r * r / dn;
        for (i, o) in dx[t * d..(t + 1) * d].iter_mut().enumerate() {
            *o += dyr[i] * gain[i] * r - row[i] * k;
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    T::of(0.5) * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let th = (k * (x + c * x * x * x)).tanh();
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * k * (T::one() + T::of(3.0) * c * x * x)
}

pub(crate) fn add_row_bias<T: Real>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

fn sum_rows_into<T: Real>(x: &[T], width: usize, out: &mut [T]) {
    for row in x.chunks_exact(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
}

pub(crate) fn copy_columns<T: Real>(src: &[T], src_width: usize, offset: usize, width: usize) -> Vec<T> {
    let n = src.len() / src_width;
    let mut out = Vec::with_capacity(n * width);
    for t in 0..n {
        out.extend_from_slice(&src[t * src_width + offset..t * src_width + offset + width]);
    }
    out
}

impl<T: Real> ModelParams<T> {
    /// Forward one sequence, keeping what the backward pass needs.
    pub fn forward_trace(&self, tokens: &[u32], mats: &MixerMatrices<T>) -> Result<ForwardTrace<T>> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let n = tokens.len();
        debug_assert!(n <= mats.n);
        let (d, dh, ff, vocab) = (cfg.d_model, cfg.head_dim(), cfg.ff_dim(), cfg.vocab_size);

        let mut x = Vec::with_capacity(n * d);
        for &tok in tokens {
            x.extend_from_slice(self.embedding.row(tok as usize));
        }

        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (u, inv1) = rms_norm(&x, &layer.mix_norm, d);
            let mut c = vec![T::zero(); n * d];
            let mut zs = Vec::with_capacity(layer.heads.len());
            let mut mixer_out = Vec::new();
            for (h, head) in layer.heads.iter().enumerate() {
                let z = match layer.head_projection(h, dh) {
                    Some(w) => {
                        let mut z = vec![T::zero(); n * dh];
                        gemm_nt(&u, w, &mut z, n, dh, d, false);
                        z
                    }
                    None => copy_columns(&u, d, h * dh, dh),
                };
                let mut outs = Vec::with_capacity(head.mixers.len());
                for (m, mixer) in head.mixers.iter().enumerate() {
                    let mut y = vec![T::zero(); n * dh];
                    for (f, _) in mixer.filters.iter().enumerate() {
                        mix_tokens_forward(&mats.mats[l][h][m][f], &z, n, dh, f, &mut y);
                    }
                    for t in 0..n {
                        for (v, b) in y[t * dh..(t + 1) * dh].iter_mut().zip(mixer.filters[0].bias_column(t)) {
                            *v += *b;
                        }
                    }
                    outs.push(y);
                }
                let y = match head.combine {
                    Some([a, b]) => outs[0].iter().zip(&outs[1]).map(|(r, c)| a * *r + b * *c).collect(),
                    None => outs[0].clone(),
                };
                for t in 0..n {
                    c[t * d + h * dh..t * d + (h + 1) * dh].copy_from_slice(&y[t * dh..(t + 1) * dh]);
                }
                if head.combine.is_some() {
                    mixer_out.push(outs);
                }
                zs.push(z);
            }
            let mut x_mid = x.clone();
            match &layer.out_proj {
                Some(p) => gemm_nt(&c, p.as_slice(), &mut x_mid, n, d, d, true),
                None => x_mid.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
            }
            let (v, inv2) = rms_norm(&x_mid, &layer.ff_norm, d);
            let mut h1 = vec![T::zero(); n * ff];
            gemm_nt(&v, layer.ff_in.as_slice(), &mut h1, n, ff, d, false);
            add_row_bias(&mut h1, &layer.ff_in_bias);
            let a1: Vec<T> = h1.iter().map(|&v| gelu(v)).collect();
            let mut x_out = x_mid.clone();
            gemm_nt(&a1, layer.ff_out.as_slice(), &mut x_out, n, d, ff, true);
            add_row_bias(&mut x_out, &layer.ff_out_bias);

            layers.push(LayerTrace {
                x_in: std::mem::replace(&mut x, x_out),
                inv1,
                u,
                z: zs,
                mixer_out,
                c,
                x_mid,
                inv2,
                v,
                h1,
                a1,
            });
        }

        let (xf, inv_f) = rms_norm(&x, &self.final_norm, d);
        let mut logits = vec![T::zero(); n * vocab];
        gemm_nt(&xf, self.lm_head.as_slice(), &mut logits, n, vocab, d, false);
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            layers,
            x_out: x,
            inv_f,
            xf,
            logits: Matrix::from_vec(n, vocab, logits)?,
        })
    }

    /// Accumulate into `grads` the gradient of a loss whose derivative with
    /// respect to this trace's logits is `dlogits` (`n × vocab_size`).
    pub fn backward(&self, trace: &ForwardTrace<T>, dlogits: &Matrix<T>, mats: &MixerMatrices<T>, grads: &mut ModelParams<T>) {
        let cfg = &self.config;
        let n = trace.tokens.len();
        let (d, dh, ff, vocab) = (cfg.d_model, cfg.head_dim(), cfg.ff_dim(), cfg.vocab_size);
        let dl = dlogits.as_slice();

        let mut dxf = vec![T::zero(); n * d];
        gemm_nn_acc(dl, self.lm_head.as_slice(), &mut dxf, n, d, vocab);
        gemm_tn_acc(dl, &trace.xf, grads.lm_head.as_mut_slice(), vocab, d, n);
        let mut dx = vec![T::zero(); n * d];
        rms_norm_backward(&dxf, &trace.x_out, &trace.inv_f, &self.final_norm, d, &mut dx, &mut grads.final_norm);

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let tr = &trace.layers[l];
            let g = &mut grads.layers[l];

            // feedforward: x_out = x_mid + W2·gelu(W1·v + b1) + b2
            sum_rows_into(&dx, d, &mut g.ff_out_bias);
            gemm_tn_acc(&dx, &tr.a1, g.ff_out.as_mut_slice(), d, ff, n);
            let mut dh1 = vec![T::zero(); n * ff];
            gemm_nn_acc(&dx, layer.ff_out.as_slice(), &mut dh1, n, ff, d);
            for (dv, &h) in dh1.iter_mut().zip(&tr.h1) {
                *dv *= gelu_grad(h);
            }
            sum_rows_into(&dh1, ff, &mut g.ff_in_bias);
            gemm_tn_acc(&dh1, &tr.v, g.ff_in.as_mut_slice(), ff, d, n);
            let mut dv = vec![T::zero(); n * d];
            gemm_nn_acc(&dh1, layer.ff_in.as_slice(), &mut dv, n, d, ff);
            let mut dx_mid = dx;
            rms_norm_backward(&dv, &tr.x_mid, &tr.inv2, &layer.ff_norm, d, &mut dx_mid, &mut g.ff_norm);

            // mixing: x_mid = x_in + P_out·concat(heads)
            let dc = match &layer.out_proj {
                Some(p) => {
                    gemm_tn_acc(&dx_mid, &tr.c, g.out_proj.as_mut().expect("grads mirror params").as_mut_slice(), d, d, n);
                    let mut dc = vec![T::zero(); n * d];
                    gemm_nn_acc(&dx_mid, p.as_slice(), &mut dc, n, d, d);
                    dc
                }
                None => dx_mid.clone(),
            };
            let mut du = vec![T::zero(); n * d];
            let mut head_slot = 0;
            for (h, head) in layer.heads.iter().enumerate() {
                let dy = copy_columns(&dc, d, h * dh, dh);
                let z = &tr.z[h];
                let mut dz = vec![T::zero(); n * dh];
                for (m, mixer) in head.mixers.iter().enumerate() {
                    let dy_m: Vec<T> = match head.combine {
                        Some(coef) => {
                            let outs = &tr.mixer_out[head_slot];
                            let gc = g.heads[h].combine.as_mut().expect("grads mirror params");
                            gc[m] += outs[m].iter().zip(&dy).fold(T::zero(), |a, (y, d)| a + *y * *d);
                            dy.iter().map(|v| *v * coef[m]).collect()
                        }
                        None => dy.clone(),
                    };
                    for (f, filter) in mixer.filters.iter().enumerate() {
                        mix_tokens_backward(
                            filter,
                            &mats.mats[l][h][m][f],
                            z,
                            &dy_m,
                            n,
                            f,
                            f == 0,
                            &mut dz,
                            &mut g.heads[h].mixers[m].filters[f],
                        );
                    }
                }
                if head.combine.is_some() {
                    head_slot += 1;
                }
                match layer.head_projection(h, dh) {
                    Some(w) => {
                        let gw = g.head_projection_mut(h, dh).expect("grads mirror params");
                        gemm_tn_acc(&dz, &tr.u, gw, dh, d, n);
                        gemm_nn_acc(&dz, w, &mut du, n, d, dh);
                    }
                    None => {
                        for t in 0..n {
                            axpy(T::one(), &dz[t * dh..(t + 1) * dh], &mut du[t * d + h * dh..t * d + (h + 1) * dh]);
                        }
                    }
                }
            }
            let mut dx_in = dx_mid;
            rms_norm_backward(&du, &tr.x_in, &tr.inv1, &layer.mix_norm, d, &mut dx_in, &mut g.mix_norm);
            dx = dx_in;
        }

        for (t, &tok) in trace.tokens.iter().enumerate() {
            axpy(T::one(), &dx[t * d..(t + 1) * d], grads.embedding.row_mut(tok as usize));
        }
    }

    /// Per-position logits (`n × vocab_size`) for each sequence of the batch.
    pub fn forward_parallel(&self, batch: &[Vec<u32>]) -> Result<Vec<Matrix<T>>> {
        let n_max = batch.iter().map(Vec::len).max().unwrap_or(0);
        if n_max > self.config.n_ctx {
            return Err(crate::error::SrmError::Length {
                requested: n_max,
                n_ctx: self.config.n_ctx,
            });
        }
        let mats = MixerMatrices::build(self, n_max)?;
        par::map_indexed(batch.len(), |i| self.forward_trace(&batch[i], &mats).map(|t| t.logits))
            .into_iter()
            .collect()
    }

    /// Forward and backward over a batch.
    ///
    /// `head` maps a sample index and its logits to a per-sample statistic
    /// and the loss derivative with respect to those logits. Gradients are
    /// summed over samples in a fixed order.
    pub fn batch_gradient<S, F>(&self, batch: &[Vec<u32>], head: F) -> Result<(Vec<S>, ModelParams<T>)>
    where
        S: Send,
        F: Fn(usize, &Matrix<T>) -> Result<(S, Matrix<T>)> + Sync + Send,
    {
        let n_max = batch.iter().map(Vec::len).max().unwrap_or(0);
        self.check_tokens(&vec![0; n_max])?;
        let mats = MixerMatrices::build(self, n_max)?;
        let ranges = par::chunk_ranges(batch.len(), GRAD_CHUNKS);
        let partials = par::map_indexed(ranges.len(), |c| -> Result<(Vec<S>, ModelParams<T>)> {
            let mut grads = self.zeros_like();
            let mut stats = Vec::with_capacity(ranges[c].len());
            for i in ranges[c].clone() {
                let trace = self.forward_trace(&batch[i], &mats)?;
                let (s, dlogits) = head(i, &trace.logits)?;
                self.backward(&trace, &dlogits, &mats, &mut grads);
                stats.push(s);
            }
            Ok((stats, grads))
        });
        let mut stats = Vec::with_capacity(batch.len());
        let mut total: Option<ModelParams<T>> = None;
        for part in partials {
            let (s, g) = part?;
            stats.extend(s);
            match total.as_mut() {
                Some(t) => t.add_scaled(&g, T::one()),
                None => total = Some(g),
            }
        }
        Ok((stats, total.unwrap_or_else(|| self.zeros_like())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SrmConfig;

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn rms_norm_rows_have_unit_rms() {
        let x: Vec<f64> = (0..12).map(|i| i as f64 - 4.0).collect();
        let (y, _) = rms_norm(&x, &[1.0; 4], 4);
        for row in y.chunks(4) {
            let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((ms - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_tokens_and_long_inputs() {
        let mut c = SrmConfig::mixed(8, 1, 2, 4);
        c.vocab_size = 5;
        let p = ModelParams::<f32>::init(&c, 0).unwrap();
        assert!(p.forward_parallel(&[vec![1, 5]]).is_err());
        assert!(p.forward_parallel(&[vec![0; 5]]).is_err());
        assert_eq!(p.forward_parallel(&[vec![0; 4]]).unwrap()[0].shape(), (4, 5));
    }

    #[test]
    fn unused_bias_positions_get_zero_gradient() {
        let mut c = SrmConfig::mixed(8, 1, 2, 6);
        c.vocab_size = 7;
        let p = ModelParams::<f64>::init(&c, 3).unwrap();
        let (_, g) = p
            .batch_gradient(&[vec![1, 2, 3]], |_, logits| {
                Ok(((), Matrix::from_fn(logits.rows(), logits.cols(), |r, c| (r + c) as f64 * 0.1)))
            })
            .unwrap();
        let bias = &g.layers[0].heads[0].mixers[0].filters[0].bias;
        for j in 3..6 {
            assert!(bias.row(j).iter().all(|v| *v == 0.0));
        }
        assert!(bias.row(0).iter().any(|v| *v != 0.0));
        let alpha = &g.layers[0].heads[1].mixers[0].filters[0].alpha;
        assert!(alpha[3..].iter().all(|v| *v == 0.0));
    }
}
