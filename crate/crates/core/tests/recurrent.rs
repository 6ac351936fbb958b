use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srm::mixing::{parallel_mix, parallel_mix_kernel};
use srm::recurrent::{init_cache, step_col, step_kernel, step_row, HeadCache};
use srm::{HeadMode, KernelMixerParams, Matrix, MixerHeadParams, MixerKind, SrmConfig, SrmError};

fn random_head(kind: MixerKind, n_ctx: usize, dh: usize, rng: &mut ChaCha8Rng) -> MixerHeadParams<f64> {
    let mut p = MixerHeadParams::zeros(kind, n_ctx, dh, true, rng.gen_bool(0.5));
    for a in p.alpha.iter_mut() {
        *a = rng.gen_range(-1.0..1.0);
    }
    p.decay_raw = rng.gen_range(-3.0..3.0);
    for b in p.bias.as_mut_slice() {
        *b = rng.gen_range(-1.0..1.0);
    }
    if let Some(c) = p.diag_const.as_mut() {
        *c = rng.gen_range(0.5..1.5);
    }
    p
}

fn columns(x: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..x.cols()).map(|j| x.column(j)).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn first_row_step_reads_an_empty_sum() {
    let mut p = MixerHeadParams::zeros(MixerKind::RowRepeat, 4, 2, true, false);
    p.alpha[0] = 1.5;
    p.bias.row_mut(0).copy_from_slice(&[0.25, -0.5]);
    let x = [2.0, -4.0];
    let mut cache = HeadCache::new(2, 1);
    let y = step_row(&x, &mut cache, &p, 0).unwrap();
    assert_eq!(y, vec![1.5 * 2.0 + 0.25, 1.5 * -4.0 - 0.5]);
    let l = p.lambda();
    assert_eq!(cache.states[0], vec![l * 1.5 * 2.0, l * 1.5 * -4.0]);
}

#[test]
fn undecayed_row_steps_are_prefix_sums() {
    let mut p = MixerHeadParams::zeros(MixerKind::RowRepeat, 3, 2, false, false);
    p.alpha = vec![1.0, 1.0, 1.0];
    let (x0, x1) = ([0.3, -1.2], [2.5, 0.7]);
    let mut cache = HeadCache::new(2, 1);
    step_row(&x0, &mut cache, &p, 0).unwrap();
    let y1 = step_row(&x1, &mut cache, &p, 1).unwrap();
    assert_eq!(y1, vec![x1[0] + x0[0], x1[1] + x0[1]]);
}

#[test]
fn first_column_step_reads_an_empty_sum() {
    let mut p = MixerHeadParams::zeros(MixerKind::ColumnRepeat, 4, 2, true, false);
    p.alpha[0] = -0.75;
    p.bias.row_mut(0).copy_from_slice(&[1.0, 2.0]);
    let mut cache = HeadCache::new(2, 1);
    let y = step_col(&[4.0, 8.0], &mut cache, &p, 0).unwrap();
    assert_eq!(y, vec![-3.0 + 1.0, -6.0 + 2.0]);
}

#[test]
fn undecayed_column_steps_factor_the_prefix_sum() {
    let c = 0.4;
    let mut p = MixerHeadParams::zeros(MixerKind::ColumnRepeat, 2, 3, false, false);
    p.alpha = vec![c, c];
    let (x0, x1) = ([1.0, -2.0, 0.5], [3.0, 0.25, -1.0]);
    let mut cache = HeadCache::new(3, 1);
    step_col(&x0, &mut cache, &p, 0).unwrap();
    let y1 = step_col(&x1, &mut cache, &p, 1).unwrap();
    let expected: Vec<f64> = (0..3).map(|r| c * (x1[r] + x0[r])).collect();
    assert!(close(&y1, &expected, 1e-15));
}

#[test]
fn row_steps_match_parallel_columns() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = random_head(MixerKind::RowRepeat, 3, 4, &mut rng);
        p.decay_raw = 0.0;
        let x = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let want = parallel_mix(&x, &p).unwrap();
        let mut cache = HeadCache::new(4, 1);
        let mut last = Vec::new();
        for (t, col) in columns(&x).iter().enumerate() {
            last = step_row(col, &mut cache, &p, t).unwrap();
        }
        assert!(close(&last, &want.column(2), 1e-12), "seed {seed}");
    }
}

#[test]
fn column_steps_match_parallel_columns() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let p = random_head(MixerKind::ColumnRepeat, 4, 3, &mut rng);
        let x = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let want = parallel_mix(&x, &p).unwrap();
        let mut cache = HeadCache::new(3, 1);
        for (t, col) in columns(&x).iter().enumerate() {
            let y = step_col(col, &mut cache, &p, t).unwrap();
            assert!(close(&y, &want.column(t), 1e-12), "seed {seed} t {t}");
        }
    }
}

#[test]
fn single_filter_kernel_step_is_a_column_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_head(MixerKind::ColumnRepeat, 5, 3, &mut rng);
    let k = KernelMixerParams::new(vec![p.clone()]).unwrap();
    let mut a = HeadCache::new(3, 1);
    let mut b = HeadCache::new(3, 1);
    for t in 0..5 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(step_kernel(&x, &mut a, &k, t).unwrap(), step_col(&x, &mut b, &p, t).unwrap());
    }
    assert_eq!(a, b);
}

#[test]
fn zero_input_kernel_step_emits_the_first_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let filters = vec![
        random_head(MixerKind::RowRepeat, 4, 3, &mut rng),
        random_head(MixerKind::ColumnRepeat, 4, 3, &mut rng),
    ];
    let k = KernelMixerParams::new(filters.clone()).unwrap();
    let mut cache = HeadCache::new(3, 2);
    for t in 0..4 {
        let y = step_kernel(&[0.0; 3], &mut cache, &k, t).unwrap();
        assert_eq!(y, filters[0].bias_column(t).to_vec());
        assert!(cache.states.iter().flatten().all(|&s| s == 0.0));
    }
}

#[test]
fn kernel_trace_matches_parallel_kernel() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let filters = (0..3)
            .map(|i| {
                let kind = if i % 2 == 0 { MixerKind::RowRepeat } else { MixerKind::ColumnRepeat };
                random_head(kind, 6, 4, &mut rng)
            })
            .collect();
        let k = KernelMixerParams::new(filters).unwrap();
        let x = Matrix::from_fn(4, 6, |_, _| rng.gen_range(-1.0..1.0));
        let want = parallel_mix_kernel(&x, &k).unwrap();
        let mut cache = HeadCache::new(4, 3);
        for (t, col) in columns(&x).iter().enumerate() {
            let y = step_kernel(col, &mut cache, &k, t).unwrap();
            assert!(close(&y, &want.column(t), 1e-12), "seed {seed} t {t}");
        }
    }
}

#[test]
fn stepping_past_the_context_overflows() {
    let p = MixerHeadParams::<f64>::zeros(MixerKind::RowRepeat, 2, 1, true, false);
    let mut cache = HeadCache::new(1, 1);
    step_row(&[1.0], &mut cache, &p, 1).unwrap();
    assert!(matches!(
        step_row(&[1.0], &mut cache, &p, 2),
        Err(SrmError::ContextOverflow { position: 2, n_ctx: 2 })
    ));
}

#[test]
fn step_kind_must_match_the_mixer() {
    let p = MixerHeadParams::<f64>::zeros(MixerKind::RowRepeat, 2, 1, true, false);
    let mut cache = HeadCache::new(1, 1);
    assert!(step_col(&[1.0], &mut cache, &p, 0).is_err());
}

#[test]
fn cache_sizes_follow_the_head_layout() {
    let mixed = SrmConfig::mixed(8, 1, 2, 16);
    let caches = init_cache::<f32>(&mixed, 3);
    assert_eq!(caches.len(), 3);
    assert!(caches.iter().all(|c| c.heads.len() == 2 && c.heads.iter().all(|h| h.scalar_count() == 4)));
    assert_eq!(caches.iter().map(|c| c.scalar_count()).sum::<usize>(), 24);

    let combined = SrmConfig {
        head_mode: HeadMode::Combined,
        ..mixed.clone()
    };
    assert_eq!(init_cache::<f32>(&combined, 1)[0].scalar_count(), 16);

    assert_eq!(HeadCache::<f32>::new(8, 4).scalar_count(), 32);
    let kernel = SrmConfig {
        n_heads: 1,
        kernel_size: 4,
        ..mixed
    };
    let c = &init_cache::<f32>(&kernel, 1)[0];
    assert_eq!(c.scalar_count(), 4 * 8);
}
