//! Data-parallel loop helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan out over the rayon global
//! pool; without it they run plain sequential loops. Either way each output
//! chunk is produced by exactly one task with a fixed internal reduction
//! order, so results are bit-identical across thread counts and across the
//! two build modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f(chunk_index, chunk)` to consecutive `chunk_len` slices of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Collect `f(0), f(1), .., f(n-1)` preserving index order.
pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_indices_cover_data() {
        let mut v = vec![0usize; 12];
        for_each_chunk_mut(&mut v, 4, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    }

    #[test]
    fn map_collect_ordered() {
        assert_eq!(map_collect(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
