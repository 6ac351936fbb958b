//! Batch-level data parallelism.
//!
//! With the `parallel` feature the per-sample loops below run on the rayon
//! pool; without it, or after [`set_parallel(false)`](set_parallel), they run
//! sequentially. Results are always collected in index order so reductions
//! downstream are independent of scheduling.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Toggle parallel execution at runtime. Has no effect when the crate was
/// built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    ENABLED.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

/// Pin the number of worker threads. One worker runs everything sequentially.
/// The thread pool can only be sized once per process; later calls with more
/// than one worker keep the existing pool and return `false`.
pub fn set_workers(n: usize) -> bool {
    if n <= 1 {
        set_parallel(false);
        return true;
    }
    set_parallel(true);
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    false
}

pub fn is_parallel() -> bool {
    ENABLED.load(Ordering::Relaxed)
}

/// Number of worker threads the parallel path will use.
pub fn workers() -> usize {
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return rayon::current_num_threads();
    }
    1
}

pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

pub fn map_mut<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && items.len() > 1 {
        use rayon::prelude::*;
        return items
            .par_iter_mut()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect();
    }
    items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Split `0..n` into at most `max_chunks` contiguous ranges of near-equal
/// size. The split depends only on `n` and `max_chunks`.
pub fn chunk_ranges(n: usize, max_chunks: usize) -> Vec<std::ops::Range<usize>> {
    let chunks = max_chunks.clamp(1, n.max(1));
    let base = n / chunks;
    let extra = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for c in 0..chunks {
        let len = base + usize::from(c < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}
