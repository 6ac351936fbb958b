use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srm::mixing::{build_structured_matrix, derive_decay, parallel_mix, parallel_mix_kernel};
use srm::{KernelMixerParams, Matrix, MixerHeadParams, MixerKind};

fn head(kind: MixerKind, alpha: &[f64], decay_raw: f64, decay: bool, dh: usize) -> MixerHeadParams<f64> {
    let mut p = MixerHeadParams::zeros(kind, alpha.len(), dh, decay, false);
    p.alpha = alpha.to_vec();
    p.decay_raw = decay_raw;
    p
}

fn random_head(kind: MixerKind, n_ctx: usize, dh: usize, rng: &mut ChaCha8Rng) -> MixerHeadParams<f64> {
    let mut p = MixerHeadParams::zeros(kind, n_ctx, dh, true, false);
    for a in p.alpha.iter_mut() {
        *a = rng.gen_range(-1.0..1.0);
    }
    p.decay_raw = rng.gen_range(-3.0..3.0);
    for b in p.bias.as_mut_slice() {
        *b = rng.gen_range(-1.0..1.0);
    }
    p
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Entry of the structured matrix straight from its closed form.
fn entry(p: &MixerHeadParams<f64>, lambda: f64, i: usize, j: usize) -> f64 {
    if j < i {
        return 0.0;
    }
    let a = match p.kind {
        MixerKind::RowRepeat => p.alpha[i],
        MixerKind::ColumnRepeat => p.alpha[j],
    };
    lambda.powi((j - i) as i32) * a
}

/// `Y[r][j] = Σ_{i ≤ j} X[r][i]·M[i][j] + β_j[r]` by three nested loops.
fn naive_mix(x: &Matrix<f64>, p: &MixerHeadParams<f64>, lambda: f64) -> Matrix<f64> {
    let (dh, n) = x.shape();
    Matrix::from_fn(dh, n, |r, j| {
        let mut acc = p.bias.get(j, r);
        for i in 0..n {
            if i <= j {
                acc += x.get(r, i) * entry(p, lambda, i, j);
            }
        }
        acc
    })
}

#[test]
fn decay_examples() {
    // 0.9 + 0.05 rounds one ulp above 0.95
    assert!((derive_decay(0.0f64, true) - 0.95).abs() <= f64::EPSILON);
    assert_eq!(derive_decay(7.3f64, false), 1.0);
    assert_eq!(derive_decay(-7.3f64, false), 1.0);
    let sig = 1.0 / (1.0 + (-20.0f64).exp());
    let l = derive_decay(20.0f64, true);
    assert!((l - 1.0).abs() < 1e-6);
    assert!((l - (0.9 + 0.1 * sig)).abs() < 1e-15);
    assert!(l < 1.0 && derive_decay(-20.0f64, true) > 0.9);
}

#[test]
fn row_repeat_layout_for_three_positions() {
    let (a0, a1, a2) = (0.7, -1.3, 2.1);
    let p = head(MixerKind::RowRepeat, &[a0, a1, a2], 0.4, true, 1);
    let l = p.lambda();
    let m = build_structured_matrix(&p, 3).unwrap();
    let expected = [[a0, l * a0, l * l * a0], [0.0, a1, l * a1], [0.0, 0.0, a2]];
    for (i, row) in expected.iter().enumerate() {
        for (j, &e) in row.iter().enumerate() {
            assert!((m.get(i, j) - e).abs() < 1e-15, "({i},{j})");
        }
    }
}

#[test]
fn column_repeat_prefix_sum_matrix() {
    let p = head(MixerKind::ColumnRepeat, &[1.0, 1.0], 0.0, false, 1);
    let m = build_structured_matrix(&p, 2).unwrap();
    assert_eq!(m.as_slice(), &[1.0, 1.0, 0.0, 1.0]);
}

#[test]
fn row_repeat_worked_entries() {
    let p = head(MixerKind::RowRepeat, &[2.0, 3.0, 5.0], 0.0, true, 1);
    let m = build_structured_matrix(&p, 3).unwrap();
    assert!((m.get(0, 2) - 1.805).abs() < 1e-12);
    assert!((m.get(1, 2) - 2.85).abs() < 1e-12);
    assert_eq!(m.get(2, 0), 0.0);
}

#[test]
fn matrix_longer_than_context_is_rejected() {
    let p = head(MixerKind::RowRepeat, &[1.0; 4], 0.0, true, 1);
    assert!(build_structured_matrix(&p, 5).is_err());
    assert!(build_structured_matrix(&p, 4).is_ok());
}

#[test]
fn diag_const_scales_only_the_diagonal() {
    let mut p = head(MixerKind::ColumnRepeat, &[0.5, -2.0, 3.0], 1.0, true, 1);
    p.diag_const = Some(0.25);
    let l = p.lambda();
    let m = build_structured_matrix(&p, 3).unwrap();
    for i in 0..3 {
        assert!((m.get(i, i) - 0.25 * p.alpha[i]).abs() < 1e-15);
        for j in i + 1..3 {
            assert!((m.get(i, j) - entry(&p, l, i, j)).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_input_returns_bias_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_head(MixerKind::RowRepeat, 6, 3, &mut rng);
    let y = parallel_mix(&Matrix::zeros(3, 5), &p).unwrap();
    for r in 0..3 {
        for j in 0..5 {
            assert_eq!(y.get(r, j), p.bias.get(j, r));
        }
    }
}

#[test]
fn undecayed_column_repeat_is_a_running_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = head(MixerKind::ColumnRepeat, &[1.0; 7], 0.0, false, 2);
    let x = random_matrix(2, 7, &mut rng);
    let y = parallel_mix(&x, &p).unwrap();
    for r in 0..2 {
        let mut sum = 0.0;
        for j in 0..7 {
            sum += x.get(r, j);
            assert!((y.get(r, j) - sum).abs() < 1e-12);
        }
    }
}

#[test]
fn parallel_mix_matches_triple_loop() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in [MixerKind::RowRepeat, MixerKind::ColumnRepeat] {
            let p = random_head(kind, 8, 4, &mut rng);
            let x = random_matrix(4, 8, &mut rng);
            let y = parallel_mix(&x, &p).unwrap();
            let oracle = naive_mix(&x, &p, p.lambda());
            assert!(y.max_abs_diff(&oracle) < 1e-12, "seed {seed} {kind:?}");
        }
    }
}

#[test]
fn parallel_mix_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in [MixerKind::RowRepeat, MixerKind::ColumnRepeat] {
        let p = random_head(kind, 8, 3, &mut rng);
        let x = random_matrix(3, 8, &mut rng);
        let base = parallel_mix(&x, &p).unwrap();
        let mut poked = x.clone();
        poked.set(1, 5, 10.0);
        let y = parallel_mix(&poked, &p).unwrap();
        for j in 0..5 {
            for r in 0..3 {
                assert_eq!(y.get(r, j), base.get(r, j));
            }
        }
        assert_ne!(y.get(1, 5), base.get(1, 5));
    }
}

#[test]
fn constant_alpha_row_and_column_repeat_coincide() {
    // with α constant both layouts are λ^(j-i)·c above the diagonal
    let alpha = [0.6; 5];
    let r = build_structured_matrix(&head(MixerKind::RowRepeat, &alpha, 1.5, true, 1), 5).unwrap();
    let c = build_structured_matrix(&head(MixerKind::ColumnRepeat, &alpha, 1.5, true, 1), 5).unwrap();
    assert_eq!(r.as_slice(), c.as_slice());
}

#[test]
fn single_filter_kernel_is_plain_mix() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in [MixerKind::RowRepeat, MixerKind::ColumnRepeat] {
        let p = random_head(kind, 6, 4, &mut rng);
        let x = random_matrix(4, 6, &mut rng);
        let k = KernelMixerParams::new(vec![p.clone()]).unwrap();
        assert_eq!(parallel_mix_kernel(&x, &k).unwrap(), parallel_mix(&x, &p).unwrap());
    }
}

#[test]
fn second_filter_reads_the_slice_shifted_up() {
    let dh = 3;
    let n = 2;
    let f0 = head(MixerKind::RowRepeat, &[0.0, 0.0], 0.0, false, dh);
    let f1 = head(MixerKind::RowRepeat, &[1.0, 1.0], 0.0, false, dh);
    let k = KernelMixerParams::new(vec![f0, f1]).unwrap();
    let mut x = Matrix::zeros(dh, n);
    x.set(dh - 1, 0, 1.0);
    let y = parallel_mix_kernel(&x, &k).unwrap();
    // filter 1 sees row dh-1 of X at row dh-2 of its slice; with all-ones
    // α and no decay it reaches both positions
    for r in 0..dh {
        for j in 0..n {
            let e = if r == dh - 2 { 1.0 } else { 0.0 };
            assert_eq!(y.get(r, j), e, "({r},{j})");
        }
    }
}

#[test]
fn kernel_matches_explicit_slices() {
    let (dh, k, n) = (4, 3, 6);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let filters: Vec<_> = (0..k)
            .map(|i| {
                let kind = if (i + seed as usize) % 2 == 0 {
                    MixerKind::RowRepeat
                } else {
                    MixerKind::ColumnRepeat
                };
                random_head(kind, n, dh, &mut rng)
            })
            .collect();
        let x = random_matrix(dh, n, &mut rng);
        let kp = KernelMixerParams::new(filters.clone()).unwrap();
        let y = parallel_mix_kernel(&x, &kp).unwrap();
        let mut oracle = Matrix::zeros(dh, n);
        for (s, f) in filters.iter().enumerate() {
            let l = f.lambda();
            for r in 0..dh {
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..=j {
                        let xv = if r + s < dh { x.get(r + s, i) } else { 0.0 };
                        acc += xv * entry(f, l, i, j);
                    }
                    oracle.set(r, j, oracle.get(r, j) + acc);
                }
            }
        }
        for r in 0..dh {
            for j in 0..n {
                oracle.set(r, j, oracle.get(r, j) + filters[0].bias.get(j, r));
            }
        }
        assert!(y.max_abs_diff(&oracle) < 1e-12, "seed {seed}");
    }
}

#[test]
fn kernel_filters_must_share_shapes() {
    let a = head(MixerKind::RowRepeat, &[1.0; 4], 0.0, true, 2);
    let b = head(MixerKind::RowRepeat, &[1.0; 5], 0.0, true, 2);
    assert!(KernelMixerParams::new(vec![a, b]).is_err());
    assert!(KernelMixerParams::<f64>::new(vec![]).is_err());
}

#[test]
fn wrong_input_height_is_rejected() {
    let p = head(MixerKind::RowRepeat, &[1.0; 4], 0.0, true, 2);
    assert!(parallel_mix(&Matrix::zeros(3, 4), &p).is_err());
    assert!(parallel_mix(&Matrix::zeros(2, 5), &p).is_err());
}
