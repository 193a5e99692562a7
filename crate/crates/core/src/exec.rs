//! Execution mode for the data-parallel inner loops.
//!
//! With the `parallel` feature (default) row-wise kernels fan out over rayon.
//! Without it, or inside [`sequential`], the same closures run in a plain loop.
//! Every parallel kernel writes disjoint output rows, so results are bitwise
//! identical in both modes.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Minimum amount of scalar work before a kernel bothers to fan out.
pub const PAR_THRESHOLD: usize = 1 << 14;

/// Runs `f` with every kernel on this thread forced to the sequential path.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// Caps the global rayon pool. Returns false if the pool was already built.
pub fn init_threads(threads: Option<usize>) -> bool {
    #[cfg(feature = "parallel")]
    {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n.max(1));
        }
        builder.build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

/// Applies `f(row_index, row)` to each `width`-sized chunk of `out`.
pub fn for_each_row<F>(out: &mut [f64], width: usize, work_per_row: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    let rows = out.len() / width;
    #[cfg(feature = "parallel")]
    if is_parallel() && rows > 1 && rows * work_per_row >= PAR_THRESHOLD {
        use rayon::prelude::*;
        out.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = (rows, work_per_row);
    for (i, row) in out.chunks_mut(width).enumerate() {
        f(i, row);
    }
}

/// Order-preserving map over `0..n`.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Order-preserving map over a slice.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && items.len() > 1 {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_scope_restores_mode() {
        let before = is_parallel();
        sequential(|| assert!(!is_parallel()));
        assert_eq!(is_parallel(), before);
    }

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = map_indices(1000, f);
        let b = sequential(|| map_indices(1000, f));
        assert_eq!(a, b);
    }
}
