//! Data-parallel loop helpers.
//!
//! With the `parallel` feature these run on the rayon pool; without it (or
//! after [`set_force_sequential`]) they run in order on the calling thread.
//! Results never depend on which path ran: maps return in index order and
//! reductions go through fixed-size chunks that are merged sequentially.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Forces the sequential path at runtime (used by benches and tests).
pub fn set_force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Applies `f` to every element with its index.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            items.par_iter_mut().enumerate().for_each(|(i, x)| f(i, x));
            return;
        }
    }
    items.iter_mut().enumerate().for_each(|(i, x)| f(i, x));
}

/// Folds `0..n` in chunks of `chunk` items, returning one accumulator per
/// chunk in chunk order. Chunk boundaries depend only on `n` and `chunk`,
/// so merging the result sequentially is reproducible across thread counts.
pub fn chunked_fold<A, I, F>(n: usize, chunk: usize, init: I, fold: F) -> Vec<A>
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) + Sync + Send,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    map_indexed(n_chunks, |c| {
        let mut acc = init();
        for i in c * chunk..((c + 1) * chunk).min(n) {
            fold(&mut acc, i);
        }
        acc
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(1000, |i| i * 3);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * 3));
    }

    #[test]
    fn chunked_fold_is_order_stable() {
        let parts = chunked_fold(103, 10, || 0.0f64, |acc, i| *acc += (i as f64).sqrt());
        assert_eq!(parts.len(), 11);
        let total: f64 = parts.iter().sum();
        set_force_sequential(true);
        let parts2 = chunked_fold(103, 10, || 0.0f64, |acc, i| *acc += (i as f64).sqrt());
        set_force_sequential(false);
        let total2: f64 = parts2.iter().sum();
        assert_eq!(total.to_bits(), total2.to_bits());
    }
}
