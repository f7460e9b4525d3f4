//! Fixed-order parallel map over indices.

use std::num::NonZeroUsize;

/// Worker cap: `GLAB_THREADS` if set, else 1 when `deterministic`, else the
/// number of available cores.
pub fn worker_count(deterministic: bool) -> usize {
    if let Some(n) = std::env::var("GLAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        return n.max(1);
    }
    if deterministic {
        1
    } else {
        std::thread::available_parallelism()
            .map(NonZeroUsize::get)
            .unwrap_or(1)
    }
}

/// `(0..n).map(f)` evaluated on up to `threads` scoped threads. Results are
/// returned in index order regardless of scheduling.
pub fn map_indexed<R, F>(n: usize, threads: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    let lo = t * chunk;
                    let hi = ((t + 1) * chunk).min(n);
                    (lo..hi).map(f).collect::<Vec<R>>()
                })
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
    fn order_is_preserved() {
        let a = map_indexed(37, 4, |i| i * i);
        let b: Vec<_> = (0..37).map(|i| i * i).collect();
        assert_eq!(a, b);
    }
}
