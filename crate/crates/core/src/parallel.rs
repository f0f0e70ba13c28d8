//! Optional per-item parallelism for the heavy kernels.
//!
//! `MATSSL_THREADS` caps the worker count (default 1). Work is split per batch
//! item and partial results are always combined in item order, so the output
//! is bit-identical for every thread count.

use std::sync::OnceLock;

use rayon::prelude::*;

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

/// Worker count read from `MATSSL_THREADS`.
pub fn threads() -> usize {
    std::env::var("MATSSL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let n = threads();
        (n > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("failed to build kernel thread pool")
        })
    })
    .as_ref()
}

/// `(0..n).map(f)` with results in index order.
pub(crate) fn map_items<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match pool() {
        Some(pool) if n > 1 => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        _ => (0..n).map(f).collect(),
    }
}
