//! Data-parallel map over independent items (images, samples, cost rows).
//!
//! With the `parallel` feature the work is spread over the rayon pool;
//! without it the same entry points run sequentially. Outputs are
//! collected in input order either way, so reductions downstream are
//! bit-deterministic regardless of scheduling.

/// Always-sequential map, kept as the comparison baseline for benches.
pub fn seq_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    seq_map(items, f)
}

/// Parallel map over an index range.
pub fn par_map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
