//! Parallel-or-sequential execution shim.
//!
//! With the `parallel` feature (default) this dispatches to rayon; without it
//! it runs a plain sequential loop, so the crate builds on targets where a
//! thread pool is unwanted. Results are collected in index order either way,
//! and reductions over the collected values happen sequentially at the call
//! site: outputs are bit-identical no matter how many threads run.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}
