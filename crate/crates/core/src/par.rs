//! Execution policy for the data-parallel kernels.
//!
//! Every kernel partitions its *output* into disjoint chunks and computes each
//! chunk with a fixed accumulation order, so results are bit-identical whether
//! the chunks run on one thread or many.

/// How a kernel schedules its independent output chunks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Exec {
    /// Parallel when the `parallel` feature is enabled, sequential otherwise.
    pub fn auto() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

impl Default for Exec {
    fn default() -> Self {
        Exec::auto()
    }
}

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized piece of `data`.
pub fn for_each_chunk<T, F>(exec: Exec, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if data.is_empty() || chunk_len == 0 {
        return;
    }
    match exec {
        Exec::Sequential => data
            .chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c))
        }
    }
}

/// Like [`for_each_chunk`] over two buffers chunked in lockstep.
pub fn for_each_chunk_pair<A, B, F>(exec: Exec, a: &mut [A], la: usize, b: &mut [B], lb: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    match exec {
        Exec::Sequential => a
            .chunks_mut(la)
            .zip(b.chunks_mut(lb))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            a.par_chunks_mut(la)
                .zip(b.par_chunks_mut(lb))
                .enumerate()
                .for_each(|(i, (x, y))| f(i, x, y))
        }
    }
}

/// Evaluates `f(i)` for `i in 0..n`, preserving order.
pub fn map_indices<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}
