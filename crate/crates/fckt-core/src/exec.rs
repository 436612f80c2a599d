//! Execution strategy for data-parallel inner loops.
//!
//! With the `parallel` feature (default) [`ordered_map`] fans work out over
//! rayon; without it the same call runs sequentially. Results always come
//! back in input order, so reductions downstream stay deterministic either
//! way. [`ordered_map_sequential`] is always available for the benches that
//! compare the two.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every item, preserving input order in the output.
pub fn ordered_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
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

/// Indexed variant of [`ordered_map`].
pub fn ordered_map_indexed<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Sequential reference path, independent of the feature flag.
pub fn ordered_map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<usize> = (0..100).collect();
        let doubled = ordered_map(&items, |x| x * 2);
        let expected: Vec<usize> = items.iter().map(|x| x * 2).collect();
        assert_eq!(doubled, expected);
        assert_eq!(ordered_map_sequential(&items, |x| x * 2), expected);
    }
}
