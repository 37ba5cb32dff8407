//! Data-parallel map with a sequential fallback.
//!
//! The hot loops (per-sample gradients, batched rollouts, episode
//! collection) are expressed as an order-preserving indexed map.  With the
//! `parallel` feature (default) the map runs on rayon; without it, or via
//! [`map_indexed_seq`], it runs sequentially.  Both paths return results in
//! index order, and all callers reduce in that order, so outputs are
//! bit-identical regardless of feature flags or thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to `0..n` and collect results in index order, in parallel when
/// the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn map_indexed<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    (0..n).into_par_iter().map(f).collect()
}

/// Apply `f` to `0..n` and collect results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    map_indexed_seq(n, f)
}

/// Sequential variant, always available; used by benches to compare against
/// the parallel path within a single build.
pub fn map_indexed_seq<U, F: Fn(usize) -> U>(n: usize, f: F) -> Vec<U> {
    (0..n).map(f).collect()
}
