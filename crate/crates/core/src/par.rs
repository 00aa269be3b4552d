//! Data-parallel map helpers with a deterministic reduction contract.
//!
//! All internal parallelism goes through [`map_range`]: map a function over
//! `0..n`, collect results in index order, and let the caller fold the vector
//! sequentially. Because the fold order is fixed, results are bit-identical
//! whether the `parallel` feature is on or off and regardless of thread
//! count. Never sum floats inside a parallel reduction.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n` and collect results in index order.
///
/// Runs on the current rayon thread pool when the `parallel` feature is
/// enabled, sequentially otherwise.
#[cfg(feature = "parallel")]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sequential reference implementation of [`map_range`].
///
/// Always available; the criterion benches use it as the baseline when
/// comparing against the rayon path.
pub fn map_range_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
