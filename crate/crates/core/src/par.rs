//! Data-parallel helpers.
//!
//! With the `parallel` feature (the default) inner loops fan out over rayon;
//! without it the same closures run sequentially. Both paths visit indices
//! in-order per element and merge results by index, so outputs are
//! bit-identical across the two builds and across thread counts.

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Runs `f(row_index, row_slice)` over the rows of a row-major buffer.
#[cfg(feature = "parallel")]
pub fn for_each_row<F>(data: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    data.par_chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_row<F>(data: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    for (i, row) in data.chunks_mut(cols).enumerate() {
        f(i, row);
    }
}

/// Caps the global worker pool from the `GARE_THREADS` env var.
///
/// A no-op when the variable is unset, unparsable, or the pool was already
/// built. Sequential builds ignore it entirely.
pub fn init_threads_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("GARE_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    }
}

/// Name of the compiled execution strategy, for manifests and bench labels.
pub fn strategy() -> &'static str {
    #[cfg(feature = "parallel")]
    {
        "parallel"
    }
    #[cfg(not(feature = "parallel"))]
    {
        "sequential"
    }
}
