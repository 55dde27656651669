//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] dispatches to
//! rayon; without it every call runs sequentially. Results are always
//! returned in index order, and reductions over chunks are folded in chunk
//! order, so the output never depends on the execution mode.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for batch loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<U, F>(exec: Exec, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// `items.iter().map(f).collect()`, possibly in parallel.
pub fn map<T, U, F>(exec: Exec, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Maps fixed-size chunks of `0..n` and folds the chunk results in order.
///
/// Chunk boundaries depend only on `n` and `chunk`, so floating-point
/// reductions are bitwise identical in both execution modes.
pub fn chunked_fold<A, F, R>(exec: Exec, n: usize, chunk: usize, map_chunk: F, init: A, mut reduce: R) -> A
where
    A: Send,
    F: Fn(std::ops::Range<usize>) -> A + Sync + Send,
    R: FnMut(A, A) -> A,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    let parts = map_range(exec, n_chunks, |c| map_chunk(c * chunk..((c + 1) * chunk).min(n)));
    parts.into_iter().fold(init, &mut reduce)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_on_order() {
        let a = map_range(Exec::Sequential, 1000, |i| i * 3);
        let b = map_range(Exec::Parallel, 1000, |i| i * 3);
        assert_eq!(a, b);
    }

    #[test]
    fn chunked_fold_is_mode_independent() {
        let xs: Vec<f64> = (0..10_007).map(|i| ((i * 7919) % 1000) as f64 * 1e-3 + 1e-9).collect();
        let sum = |exec| {
            chunked_fold(exec, xs.len(), 64, |r| xs[r].iter().sum::<f64>(), 0.0, |a, b| a + b)
        };
        assert_eq!(sum(Exec::Sequential).to_bits(), sum(Exec::Parallel).to_bits());
    }
}
