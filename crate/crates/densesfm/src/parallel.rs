//! Thin switch between rayon and sequential iteration.
//!
//! Every caller maps an input slice to an output `Vec` and then reduces
//! sequentially, so results are identical for any worker count and for the
//! sequential fallback build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `items` to a vector, preserving input order.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Maps `items` to a vector, preserving input order.
#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Runs `f` inside a worker pool capped at `threads` workers.
///
/// `None` keeps the process-global pool. With the `parallel` feature off the
/// cap is meaningless and `f` simply runs on the calling thread.
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("building a rayon pool cannot fail for a sane thread count")
            .install(f),
        None => f(),
    }
}

/// Runs `f` inside a worker pool capped at `threads` workers.
#[cfg(not(feature = "parallel"))]
pub fn with_threads<R>(threads: Option<usize>, f: impl FnOnce() -> R) -> R {
    let _ = threads;
    f()
}
