//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan out over rayon's current
//! pool; without it they are plain iterators. Output order always matches
//! input order and every reduction happens afterwards in index order, so the
//! two builds produce bit-identical numbers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Map `f` over a slice, collecting results in order.
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

/// Fallible variant of [`map_range`]; returns the first error by index.
pub fn try_map_range<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_range(n, f).into_iter().collect()
}

/// Sum per-chunk vectors element-wise in chunk order.
///
/// `f(lo, hi)` returns the partial sum for items `lo..hi`. Chunk boundaries
/// depend only on `n` and `chunk`, never on the thread count.
pub fn chunked_sum<F>(n: usize, chunk: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, usize) -> Vec<f64> + Sync + Send,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    let partials = map_range(n_chunks, |k| {
        let lo = k * chunk;
        f(lo, (lo + chunk).min(n))
    });
    let mut total = vec![0.0; width];
    for p in partials {
        debug_assert_eq!(p.len(), width);
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Number of worker threads the parallel helpers will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_range(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn chunked_sum_matches_serial() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let s = chunked_sum(xs.len(), 37, 1, |lo, hi| vec![xs[lo..hi].iter().sum()]);
        let mut serial = 0.0;
        for k in 0..xs.len().div_ceil(37) {
            serial += xs[k * 37..((k + 1) * 37).min(1000)].iter().sum::<f64>();
        }
        assert_eq!(s[0], serial);
    }
}
