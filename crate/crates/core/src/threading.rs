//! Optional intra-op parallelism with bit-identical results.
//!
//! Work items (attention windows, fusion branches) are mapped to
//! independent results and reduced afterwards in index order, so the
//! arithmetic is identical whether the map runs sequentially or on a
//! rayon pool. The default is single-threaded.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Set the intra-op thread count. 0 or 1 means sequential.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::SeqCst);
    if n > 1 {
        // Ignore the error if a global pool already exists; the THREADS
        // value still caps our own usage decisions.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

/// Map `f` over `0..n`, collecting results in index order.
///
/// The parallel and sequential paths produce the same `Vec`, element for
/// element; any reduction the caller performs afterwards is therefore
/// order-stable regardless of thread count.
pub fn indexed_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if threads() > 1 && n > 1 {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}
