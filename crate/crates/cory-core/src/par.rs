//! Data-parallel map over batch indices, with a sequential fallback.
//!
//! Batch rollouts and sweep cells are embarrassingly parallel: each index
//! draws from its own rng stream and writes only its own slot, so the
//! parallel and sequential paths produce bit-identical results. The
//! `parallel` feature (on by default) backs [`par_map_indexed`] with rayon;
//! [`seq_map_indexed`] is always available so benchmarks can compare both.

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Always-sequential variant of [`par_map_indexed`].
pub fn seq_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential() {
        let f = |i: usize| (i as f64).sqrt() * 3.0;
        assert_eq!(par_map_indexed(100, f), seq_map_indexed(100, f));
    }
}
