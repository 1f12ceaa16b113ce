//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) per-item work is distributed over the
//! rayon pool. Without it, or with [`Exec::Sequential`], the same closures run
//! on the calling thread. Reductions never depend on the schedule: per-item
//! results are collected in index order and summed pairwise, so both paths
//! produce bit-identical sums.

/// Execution strategy for batch helpers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Parallel,
    Sequential,
}

impl Exec {
    /// Whether this strategy actually runs on the rayon pool in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// `Sequential` for a thread count of 1, `Parallel` otherwise.
    pub fn for_threads(threads: usize) -> Self {
        if threads == 1 {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

/// Sizes the global pool to `threads` workers (0 keeps the pool default).
/// Returns false if the pool was already initialised or the build has none.
pub fn init_global_pool(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<S, T, F>(exec: Exec, items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Applies `f` to consecutive mutable chunks of `data` of length `chunk`.
pub fn for_each_chunk_mut<T, F>(exec: Exec, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Pairwise (cascade) summation. Error grows as O(log n) rather than O(n).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BASE: usize = 8;
    if values.len() <= BASE {
        return values.iter().fold(0.0, |acc, v| acc + v);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}
