//! Data-parallel map over work items, with a sequential fallback.
//!
//! Both paths return results in input order, so callers that fold the output
//! left-to-right get bit-identical sums whether or not the `parallel` feature
//! is enabled. Anything stochastic must take a pre-derived RNG stream per
//! item (see [`crate::rng`]); nothing here may touch shared mutable state.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, in parallel when the `parallel` feature is on.
/// Output order always matches input order.
pub fn map<T, R, Fn_>(items: &[T], f: Fn_) -> Vec<R>
where
    T: Sync,
    R: Send,
    Fn_: Fn(usize, &T) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items
            .par_iter()
            .enumerate()
            .map(|(i, item)| f(i, item))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

/// Always-sequential variant; the benchmark suite uses it as the baseline the
/// parallel path is compared against.
pub fn map_sequential<T, R, Fn_>(items: &[T], f: Fn_) -> Vec<R>
where
    Fn_: Fn(usize, &T) -> R,
{
    items
        .iter()
        .enumerate()
        .map(|(i, item)| f(i, item))
        .collect()
}
