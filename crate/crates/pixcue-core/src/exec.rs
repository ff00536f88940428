//! Execution-mode helpers: data-parallel inner loops with a sequential
//! fallback when the `parallel` feature is disabled.

/// How a data-parallel loop should run. The public API picks the default
/// from the crate feature; benches drive both explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl ExecMode {
    /// Default mode for the current build.
    pub fn auto() -> Self {
        #[cfg(feature = "parallel")]
        {
            ExecMode::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            ExecMode::Sequential
        }
    }
}

/// Maps `f` over `0..n`, collecting results in index order. The output is
/// identical in both modes; parallelism never changes reduction order.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}

/// Chunked in-place update over a mutable slice: the slice is split into
/// `rows` equal chunks of `chunk` elements and `f(row_index, chunk)` fills
/// each one.
pub fn for_each_chunk<F>(mode: ExecMode, data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(data.len() % chunk.max(1), 0);
    match mode {
        ExecMode::Sequential => {
            for (i, c) in data.chunks_mut(chunk).enumerate() {
                f(i, c);
            }
        }
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(ExecMode::auto(), 100, |i| i * i);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * i);
        }
    }

    #[test]
    fn chunked_update_matches_sequential() {
        let mut a = vec![0.0; 64];
        let mut b = vec![0.0; 64];
        let f = |i: usize, c: &mut [f64]| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 10 + j) as f64;
            }
        };
        for_each_chunk(ExecMode::Sequential, &mut a, 8, f);
        for_each_chunk(ExecMode::auto(), &mut b, 8, f);
        assert_eq!(a, b);
    }
}
