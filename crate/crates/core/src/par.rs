//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) `Parallelism::Rayon` dispatches to the
//! rayon thread pool. Without it every request runs sequentially. Results are
//! always returned in index order, so both paths produce identical output.

/// Execution strategy for per-factor work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Rayon,
}

impl Parallelism {
    /// Whether rayon is actually compiled in and selected.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

/// `(0..n).map(f).collect()`, in parallel when enabled.
pub fn map_range<T, F>(p: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if p.is_parallel() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = p;
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_range`]. Returns the error with the lowest index.
pub fn try_map_range<T, E, F>(p: Parallelism, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_range(p, n, f).into_iter().collect()
}

/// Maps over a slice.
pub fn map_slice<S, T, F>(p: Parallelism, items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_range(p, items.len(), |i| f(&items[i]))
}
