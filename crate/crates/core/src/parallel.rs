//! Data-parallel map helpers with a sequential fallback.
//!
//! Build with the `parallel` feature (default) to run indexed maps on the
//! rayon pool; without it the same entry points run sequentially. Callers
//! pass a pure `index -> T` function, so both modes produce bit-identical
//! results and reductions stay in index order.
//!
//! [`run_indexed_seq`] is always available so benchmarks can compare the two
//! paths inside one binary.

/// Map `0..n` through `f`, sequentially.
pub fn run_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    (0..n).map(f).collect()
}

/// Map `0..n` through `f` on the rayon pool when the `parallel` feature is
/// enabled, sequentially otherwise. `f` must be pure in its index.
#[cfg(feature = "parallel")]
pub fn run_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    run_indexed_seq(n, f)
}

/// Configure the global thread pool size. Call once at process start; later
/// calls are ignored (rayon pins the pool after first use).
#[cfg(feature = "parallel")]
pub fn set_threads(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn set_threads(_n: usize) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential() {
        let f = |i: usize| (i as f32).sin() * (i as f32 + 1.0);
        let a = run_indexed(257, f);
        let b = run_indexed_seq(257, f);
        assert_eq!(a, b);
    }
}
