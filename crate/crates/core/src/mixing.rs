//! Structured causal mixing matrices in their dense, sequence-parallel form.
//!
//! A row-repeat matrix has entry `(i, j) = λ^(j-i) · α_i` and a column-repeat
//! matrix has entry `(i, j) = λ^(j-i) · α_j`, both zero below the diagonal.
//! Inputs are laid out hidden-by-position (`d_h × n`) so that a mixing layer is
//! `Y = X·M + B`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SrmError};
use crate::real::{sigmoid, Real};
use crate::tensor::{axpy, dot, matmul, Matrix};

pub const DECAY_FLOOR: f64 = 0.9;
pub const DECAY_SPAN: f64 = 0.1;
/// Initial unconstrained decay parameter, giving `λ ≈ 0.988`.
pub const DECAY_RAW_INIT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MixerKind {
    RowRepeat,
    ColumnRepeat,
}

/// `λ = 0.9 + 0.1·σ(θ)` when decay is enabled, exactly one otherwise.
pub fn derive_decay<T: Real>(decay_raw: T, decay_enabled: bool) -> T {
    if decay_enabled {
        T::of(DECAY_FLOOR) + T::of(DECAY_SPAN) * sigmoid(decay_raw)
    } else {
        T::one()
    }
}

/// `dλ/dθ`, zero when decay is disabled.
pub fn decay_derivative<T: Real>(decay_raw: T, decay_enabled: bool) -> T {
    if decay_enabled {
        let s = sigmoid(decay_raw);
        T::of(DECAY_SPAN) * s * (T::one() - s)
    } else {
        T::zero()
    }
}

/// Parameters of one structured mixing matrix.
///
/// `bias` is stored position-major: row `j` holds the bias column `β_j`, so
/// its shape is `n_ctx × head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerHeadParams<T> {
    pub kind: MixerKind,
    pub alpha: Vec<T>,
    pub decay_raw: T,
    pub decay_enabled: bool,
    pub bias: Matrix<T>,
    pub diag_const: Option<T>,
    pub head_dim: usize,
}

impl<T: Real> MixerHeadParams<T> {
    pub fn zeros(kind: MixerKind, n_ctx: usize, head_dim: usize, decay_enabled: bool, diag_const: bool) -> Self {
        MixerHeadParams {
            kind,
            alpha: vec![T::zero(); n_ctx],
            decay_raw: T::zero(),
            decay_enabled,
            bias: Matrix::zeros(n_ctx, head_dim),
            diag_const: diag_const.then(T::zero),
            head_dim,
        }
    }

    #[inline]
    pub fn n_ctx(&self) -> usize {
        self.alpha.len()
    }

    #[inline]
    pub fn lambda(&self) -> T {
        derive_decay(self.decay_raw, self.decay_enabled)
    }

    #[inline]
    pub fn bias_column(&self, j: usize) -> &[T] {
        self.bias.row(j)
    }

    #[inline]
    pub(crate) fn diag_scale(&self) -> T {
        self.diag_const.unwrap_or_else(T::one)
    }

    /// Weight applied to position `i` when mixed into position `j ≥ i`,
    /// excluding the decay factor.
    #[inline]
    pub(crate) fn weight(&self, i: usize, j: usize) -> T {
        match self.kind {
            MixerKind::RowRepeat => self.alpha[i],
            MixerKind::ColumnRepeat => self.alpha[j],
        }
    }

    pub fn cast<U: Real>(&self) -> MixerHeadParams<U> {
        MixerHeadParams {
            kind: self.kind,
            alpha: self.alpha.iter().map(|v| U::of(v.f64())).collect(),
            decay_raw: U::of(self.decay_raw.f64()),
            decay_enabled: self.decay_enabled,
            bias: self.bias.cast(),
            diag_const: self.diag_const.map(|v| U::of(v.f64())),
            head_dim: self.head_dim,
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.n_ctx() {
            return Err(SrmError::Length {
                requested: n,
                n_ctx: self.n_ctx(),
            });
        }
        Ok(())
    }
}

/// `k` column-shifted filters whose outputs are summed; only filter 0's bias
/// is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMixerParams<T> {
    pub filters: Vec<MixerHeadParams<T>>,
}

impl<T: Real> KernelMixerParams<T> {
    pub fn new(filters: Vec<MixerHeadParams<T>>) -> Result<Self> {
        let first = filters
            .first()
            .ok_or_else(|| SrmError::Parameter("a kernel needs at least one filter".into()))?;
        if filters
            .iter()
            .any(|f| f.head_dim != first.head_dim || f.n_ctx() != first.n_ctx())
        {
            return Err(SrmError::Parameter(
                "kernel filters must share head_dim and n_ctx".into(),
            ));
        }
        Ok(KernelMixerParams { filters })
    }

    #[inline]
    pub fn kernel_size(&self) -> usize {
        self.filters.len()
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.filters[0].head_dim
    }

    #[inline]
    pub fn n_ctx(&self) -> usize {
        self.filters[0].n_ctx()
    }

    pub fn cast<U: Real>(&self) -> KernelMixerParams<U> {
        KernelMixerParams {
            filters: self.filters.iter().map(|f| f.cast()).collect(),
        }
    }
}

/// Dense `n × n` upper-triangular mixing matrix.
pub fn build_structured_matrix<T: Real>(params: &MixerHeadParams<T>, n: usize) -> Result<Matrix<T>> {
    params.check_len(n)?;
    let lambda = params.lambda();
    let powers: Vec<T> = (0..n).map(|p| lambda.powi(p as i32)).collect();
    let diag = params.diag_const;
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                match diag {
                    Some(c) => c * params.alpha[i],
                    None => params.alpha[i],
                }
            } else {
                powers[j - i] * params.weight(i, j)
            };
            m.set(i, j, v);
        }
    }
    Ok(m)
}

/// `Y = X·M + B[:, :n]` for `X` of shape `d_h × n`.
pub fn parallel_mix<T: Real>(x: &Matrix<T>, params: &MixerHeadParams<T>) -> Result<Matrix<T>> {
    if x.rows() != params.head_dim {
        return Err(SrmError::Dimension(format!(
            "input has {} rows but head_dim is {}",
            x.rows(),
            params.head_dim
        )));
    }
    let n = x.cols();
    let m = build_structured_matrix(params, n)?;
    let mut y = matmul(x, &m)?;
    for r in 0..y.rows() {
        for j in 0..n {
            let v = y.get(r, j) + params.bias.get(j, r);
            y.set(r, j, v);
        }
    }
    Ok(y)
}

/// Kernelized mixing: `Y = Σ_i X_pad[i..i+d_h, :]·W_i + β_0`, where `X_pad` is
/// `X` with `k` zero rows appended at the bottom.
pub fn parallel_mix_kernel<T: Real>(x: &Matrix<T>, kparams: &KernelMixerParams<T>) -> Result<Matrix<T>> {
    let dh = kparams.head_dim();
    if x.rows() != dh {
        return Err(SrmError::Dimension(format!(
            "input has {} rows but head_dim is {dh}",
            x.rows()
        )));
    }
    let n = x.cols();
    kparams.filters[0].check_len(n)?;
    let mut y = Matrix::zeros(dh, n);
    for (i, filter) in kparams.filters.iter().enumerate() {
        let slice = Matrix::from_fn(dh, n, |r, c| if r + i < dh { x.get(r + i, c) } else { T::zero() });
        let m = build_structured_matrix(filter, n)?;
        let part = matmul(&slice, &m)?;
        for (acc, v) in y.as_mut_slice().iter_mut().zip(part.as_slice()) {
            *acc += *v;
        }
    }
    let bias = &kparams.filters[0].bias;
    for r in 0..dh {
        for j in 0..n {
            let v = y.get(r, j) + bias.get(j, r);
            y.set(r, j, v);
        }
    }
    Ok(y)
}

// Token-major kernels used by the model. Activations are `n × width` with the
// head occupying `width`-strided rows; `shift` selects the kernel slice, so
// row `t` of the filter input is `x[t][shift..dh]` followed by zeros.

/// `y[j] += Σ_{i≤j} M[i,j] · x_shift[i]`.
pub(crate) fn mix_tokens_forward<T: Real>(m: &Matrix<T>, x: &[T], n: usize, dh: usize, shift: usize, y: &mut [T]) {
    let live = dh.saturating_sub(shift);
    if live == 0 {
        return;
    }
    for j in 0..n {
        let yj = &mut y[j * dh..j * dh + live];
        for i in 0..=j {
            let w = m.get(i, j);
            axpy(w, &x[i * dh + shift..i * dh + dh], yj);
        }
    }
}

/// Backward of [`mix_tokens_forward`] plus the bias when `with_bias`.
/// Accumulates into `dx` and `grad`.
pub(crate) fn mix_tokens_backward<T: Real>(
    params: &MixerHeadParams<T>,
    m: &Matrix<T>,
    x: &[T],
    dy: &[T],
    n: usize,
    shift: usize,
    with_bias: bool,
    dx: &mut [T],
    grad: &mut MixerHeadParams<T>,
) {
    let dh = params.head_dim;
    if with_bias {
        for j in 0..n {
            for (g, d) in grad.bias.row_mut(j).iter_mut().zip(&dy[j * dh..(j + 1) * dh]) {
                *g += *d;
            }
        }
    }
    let live = dh.saturating_sub(shift);
    if live == 0 {
        return;
    }
    let lambda = params.lambda();
    let powers: Vec<T> = (0..n).map(|p| lambda.powi(p as i32)).collect();
    let mut dlambda = T::zero();
    let mut ddiag = T::zero();
    for i in 0..n {
        let xi = &x[i * dh + shift..i * dh + dh];
        let dxi = &mut dx[i * dh + shift..i * dh + dh];
        for j in i..n {
            let dyj = &dy[j * dh..j * dh + live];
            axpy(m.get(i, j), dyj, dxi);
            let dm = dot(xi, dyj);
            if i == j {
                let scale = params.diag_scale();
                grad.alpha[i] += dm * scale;
                if params.diag_const.is_some() {
                    ddiag += dm * params.alpha[i];
                }
            } else {
                let p = j - i;
                let w = params.weight(i, j);
                let slot = match params.kind {
                    MixerKind::RowRepeat => i,
                    MixerKind::ColumnRepeat => j,
                };
                grad.alpha[slot] += dm * powers[p];
                dlambda += dm * T::of(p as f64) * powers[p - 1] * w;
            }
        }
    }
    grad.decay_raw += dlambda * decay_derivative(params.decay_raw, params.decay_enabled);
    if let Some(g) = grad.diag_const.as_mut() {
        *g += ddiag;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(kind: MixerKind, alpha: Vec<f64>, decay_raw: f64, decay: bool, dh: usize) -> MixerHeadParams<f64> {
        let n = alpha.len();
        let mut p = MixerHeadParams::zeros(kind, n, dh, decay, false);
        p.alpha = alpha;
        p.decay_raw = decay_raw;
        p
    }

    #[test]
    fn decay_parameterization() {
        assert!((derive_decay(0.0f64, true) - 0.95).abs() < 1e-15);
        assert_eq!(derive_decay(123.0f64, false), 1.0);
        assert!((derive_decay(20.0f64, true) - 1.0).abs() < 1e-6);
        let l = derive_decay(-50.0f64, true);
        assert!((0.9..=1.0).contains(&l));
        assert!((decay_derivative(0.0f64, true) - 0.025).abs() < 1e-15);
    }

    #[test]
    fn column_repeat_prefix_matrix() {
        let p = head(MixerKind::ColumnRepeat, vec![1.0, 1.0], 0.0, false, 1);
        let m = build_structured_matrix(&p, 2).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn row_repeat_worked_entries() {
        let mut p = head(MixerKind::RowRepeat, vec![2.0, 3.0, 5.0], 0.0, true, 1);
        assert!((p.lambda() - 0.95).abs() < 1e-15);
        let m = build_structured_matrix(&p, 3).unwrap();
        assert!((m.get(0, 2) - 1.805).abs() < 1e-12);
        assert!((m.get(1, 2) - 2.85).abs() < 1e-12);
        assert_eq!(m.get(2, 0), 0.0);
        assert_eq!(m.get(2, 2), 5.0);

        p.diag_const = Some(0.5);
        let m = build_structured_matrix(&p, 3).unwrap();
        assert_eq!(m.get(1, 1), 1.5);
        assert!((m.get(1, 2) - 2.85).abs() < 1e-12);
    }

    #[test]
    fn length_and_dimension_errors() {
        let p = head(MixerKind::RowRepeat, vec![1.0; 4], 0.0, true, 2);
        assert!(matches!(
            build_structured_matrix(&p, 5),
            Err(SrmError::Length { requested: 5, n_ctx: 4 })
        ));
        let x = Matrix::<f64>::zeros(3, 2);
        assert!(matches!(parallel_mix(&x, &p), Err(SrmError::Dimension(_))));
    }

    #[test]
    fn zero_input_yields_bias() {
        let mut p = head(MixerKind::RowRepeat, vec![0.3, -0.2, 0.7], 1.0, true, 2);
        p.bias = Matrix::from_fn(3, 2, |j, r| (j * 10 + r) as f64);
        let y = parallel_mix(&Matrix::zeros(2, 3), &p).unwrap();
        for j in 0..3 {
            for r in 0..2 {
                assert_eq!(y.get(r, j), (j * 10 + r) as f64);
            }
        }
    }

    #[test]
    fn column_repeat_without_decay_is_prefix_sum() {
        let p = head(MixerKind::ColumnRepeat, vec![1.0; 5], 0.0, false, 3);
        let x = Matrix::from_fn(3, 5, |r, c| (r as f64 + 1.0) * (c as f64 - 2.0));
        let y = parallel_mix(&x, &p).unwrap();
        for r in 0..3 {
            let mut run = 0.0;
            for j in 0..5 {
                run += x.get(r, j);
                assert!((y.get(r, j) - run).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_filter_kernel_matches_plain_mix() {
        let mut p = head(MixerKind::ColumnRepeat, vec![0.4, -0.1, 0.9, 0.2], 0.3, true, 3);
        p.bias = Matrix::from_fn(4, 3, |j, r| 0.1 * (j + r) as f64);
        let k = KernelMixerParams::new(vec![p.clone()]).unwrap();
        let x = Matrix::from_fn(3, 4, |r, c| ((r * 7 + c * 3) as f64).cos());
        let a = parallel_mix(&x, &p).unwrap();
        let b = parallel_mix_kernel(&x, &k).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn kernel_filters_must_agree() {
        let a = MixerHeadParams::<f64>::zeros(MixerKind::ColumnRepeat, 4, 2, true, false);
        let b = MixerHeadParams::<f64>::zeros(MixerKind::ColumnRepeat, 4, 3, true, false);
        assert!(KernelMixerParams::new(vec![a, b]).is_err());
        assert!(KernelMixerParams::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn kernel_shifts_rows_up_by_filter_index() {
        // Single nonzero at the last hidden row; filter 1 reads it one row up.
        let dh = 4;
        let mut f0 = head(MixerKind::ColumnRepeat, vec![0.0; 3], 0.0, false, dh);
        f0.alpha = vec![0.0; 3];
        let f1 = head(MixerKind::ColumnRepeat, vec![1.0; 3], 0.0, false, dh);
        let k = KernelMixerParams::new(vec![f0, f1]).unwrap();
        let mut x = Matrix::zeros(dh, 3);
        x.set(dh - 1, 0, 1.0);
        let y = parallel_mix_kernel(&x, &k).unwrap();
        for j in 0..3 {
            for r in 0..dh {
                let want = if r == dh - 2 { 1.0 } else { 0.0 };
                assert_eq!(y.get(r, j), want, "row {r} col {j}");
            }
        }
    }
}
