//! Timing property kept in its own test binary so no other test competes
//! for the CPU while it measures.

use srm::bench::{bench_decode, BenchOptions, DecodeMode};
use srm::{par, ModelParams, SrmConfig};

#[test]
fn doubling_the_batch_keeps_total_throughput() {
    // one worker, as the bench command defaults to
    par::set_workers(1);
    let mut c = SrmConfig::mixed(32, 2, 4, 256);
    c.vocab_size = 258;
    let m = ModelParams::<f32>::init(&c, 0).unwrap();
    let sizes: Vec<usize> = (0..7).map(|i| 1 << i).collect();
    let opts = BenchOptions {
        batch_sizes: sizes.clone(),
        gen_len: 200,
        modes: vec![DecodeMode::LogitsOnly],
        memory_budget: None,
    };
    // best of several runs, to keep scheduler noise out of a throughput
    // property
    let mut best = vec![0.0f64; sizes.len()];
    for _ in 0..7 {
        for r in bench_decode(&m, &opts).unwrap() {
            let i = sizes.iter().position(|&b| b == r.batch_size).unwrap();
            best[i] = best[i].max(r.tokens_per_second);
        }
    }
    for w in 0..sizes.len() - 1 {
        assert!(
            best[w + 1] >= 0.9 * best[w],
            "batch {} gives {:.0} tok/s, batch {} gives {:.0}",
            sizes[w],
            best[w],
            sizes[w + 1],
            best[w + 1]
        );
    }
}
