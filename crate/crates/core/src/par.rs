//! Data-parallel iteration over independent work items.
//!
//! With the `parallel` feature (default) items are distributed over the rayon
//! global pool; without it every helper degrades to a plain sequential loop
//! with identical results. Work items never share mutable state, so the two
//! paths are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f` on every item.
pub fn for_each<T, F>(items: Vec<T>, f: F)
where
    T: Send,
    F: Fn(T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    items.into_par_iter().for_each(f);
    #[cfg(not(feature = "parallel"))]
    items.into_iter().for_each(f);
}

/// Maps every item, preserving input order in the output.
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Maps `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Whether the crate was built with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let out = map((0..1000).collect(), |x: u32| x * 2);
        assert_eq!(out, (0..1000).map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(map_range(5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn for_each_writes_disjoint_slices() {
        let mut buf = vec![0usize; 64];
        let items: Vec<(usize, &mut [usize])> = buf.chunks_mut(8).enumerate().collect();
        for_each(items, |(i, chunk)| chunk.iter_mut().for_each(|x| *x = i));
        for (i, chunk) in buf.chunks(8).enumerate() {
            assert!(chunk.iter().all(|&x| x == i));
        }
    }
}
