//! Data-parallel helpers. With the `parallel` feature these dispatch to rayon;
//! without it they run the same closures sequentially. Each row or item is
//! computed independently and results are collected in index order, so
//! output is bitwise identical for any thread count.

/// Below this many elements a row loop stays on the calling thread.
#[cfg(feature = "parallel")]
const PAR_MIN_ELEMS: usize = 1 << 15;

/// Calls `f(row_index, row)` for each `cols`-wide row of `data`.
pub fn for_each_row<T, F>(data: &mut [T], cols: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if data.len() >= PAR_MIN_ELEMS && rayon::current_num_threads() > 1 {
            data.par_chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
            return;
        }
    }
    data.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}

/// Maps `f` over `items`, preserving order.
pub fn map_collect<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if items.len() > 1 && rayon::current_num_threads() > 1 {
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

/// True when the crate was built with rayon support.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
