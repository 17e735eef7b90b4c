//! Data-parallel map helpers with a sequential fallback.
//!
//! Every hot loop in the crate (per-source Dijkstra, per-node torsion wedges,
//! per-replication Monte Carlo, per-θ profile points) is expressed as an
//! order-preserving indexed map, so the parallel and sequential builds produce
//! bit-identical output. Enable the default `parallel` feature for rayon;
//! without it the same entry points run sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving index order in the output.
#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    map_range_seq(n, f)
}

/// Sequential variant of [`map_range`], available in every build.
///
/// Used as the baseline side of the criterion benches; also the body of the
/// fallback when the `parallel` feature is off.
pub fn map_range_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Installs a global rayon pool with `n` threads.
///
/// Returns `false` when the crate was built without the `parallel` feature or
/// when a pool already exists (rayon allows one global pool per process).
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .is_ok()
}

/// Installs a global rayon pool with `n` threads (no-op without `parallel`).
#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) -> bool {
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let squares = map_range(100, |i| i * i);
        let expected = map_range_seq(100, |i| i * i);
        assert_eq!(squares, expected);
    }
}
