//! Deterministic data-parallel execution.
//!
//! Work is split into fixed-size chunks indexed `0..n_chunks`; each chunk is
//! computed independently (in parallel when the `parallel` feature is active)
//! and the per-chunk results are combined over a fixed pairwise tree in chunk
//! order. Outputs therefore never depend on the worker count.

use std::sync::atomic::{AtomicBool, Ordering};

/// Number of Monte-Carlo samples per chunk (one RNG stream per chunk).
pub const CHUNK: usize = 8192;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential code path even when the `parallel` feature is
/// enabled. Intended for benchmarks comparing the two executors.
pub fn set_force_sequential(v: bool) {
    FORCE_SEQUENTIAL.store(v, Ordering::SeqCst);
}

pub fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Apply `f` to every index in `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !sequential_forced() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Split `n_items` into chunks of size [`CHUNK`], map each chunk to an
/// accumulator and fold the accumulators over a fixed pairwise tree.
pub fn chunked_reduce<A, F, R>(n_items: usize, map_chunk: F, combine: R) -> Option<A>
where
    A: Send,
    F: Fn(usize, std::ops::Range<usize>) -> A + Sync + Send,
    R: Fn(A, A) -> A + Copy,
{
    let n_chunks = n_items.div_ceil(CHUNK);
    let parts = map_indexed(n_chunks, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n_items);
        map_chunk(c, lo..hi)
    });
    fold_pairwise(parts, combine)
}

/// Fold a vector over a fixed pairwise tree (by index), independent of how
/// the elements were produced.
pub fn fold_pairwise<A, R>(mut parts: Vec<A>, combine: R) -> Option<A>
where
    R: Fn(A, A) -> A + Copy,
{
    if parts.is_empty() {
        return None;
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_reduce_counts_items() {
        let total = chunked_reduce(3 * CHUNK + 17, |_, r| r.len(), |a, b| a + b).unwrap();
        assert_eq!(total, 3 * CHUNK + 17);
    }

    #[test]
    fn sequential_override_matches_parallel() {
        let run = || {
            chunked_reduce(
                2 * CHUNK + 5,
                |c, r| r.map(|i| ((i * 31 + c) as f64).sin()).sum::<f64>(),
                |a, b| a + b,
            )
            .unwrap()
        };
        let par = run();
        set_force_sequential(true);
        let seq = run();
        set_force_sequential(false);
        assert_eq!(par.to_bits(), seq.to_bits());
    }
}
