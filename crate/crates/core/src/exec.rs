//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in index order so that downstream reductions
//! run in a fixed order and stay bit-identical with or without `parallel`.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work items below this count are not worth splitting.
#[cfg(feature = "parallel")]
const MIN_CHUNK: usize = 8;

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n)
            .into_par_iter()
            .with_min_len(MIN_CHUNK)
            .map(f)
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Maps over a slice, preserving order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Like [`map_slice`] but without a minimum chunk, for coarse jobs such as
/// whole solver runs.
pub fn map_coarse<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().with_max_len(1).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sums in index order.
pub fn ordered_sum(values: &[f64]) -> f64 {
    values.iter().sum()
}

/// True when the crate was built with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
