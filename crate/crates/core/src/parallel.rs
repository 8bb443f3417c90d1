//! Scoped worker fan-out with order-independent results.

use std::num::NonZeroUsize;
use std::thread;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "TDCN_THREADS";

/// Worker count: `TDCN_THREADS` if set to a positive integer, otherwise the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, NonZeroUsize::get))
}

/// Apply `f` to every index in `0..n` using up to `workers` threads and
/// return the results in index order.
pub fn map_indices<R, F>(n: usize, workers: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let lo = (w * chunk).min(n);
                let hi = ((w + 1) * chunk).min(n);
                s.spawn(move || (lo..hi).map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_keep_index_order_for_any_worker_count() {
        let serial = map_indices(37, 1, |i| i * i);
        for w in [2, 3, 8, 100] {
            assert_eq!(map_indices(37, w, |i| i * i), serial);
        }
        assert!(map_indices(0, 4, |i| i).is_empty());
    }
}
