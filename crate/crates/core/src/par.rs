//! Order-preserving map over independent work items.
//!
//! With the `parallel` feature and `jobs > 1` the items run on a rayon pool
//! of `jobs` threads; otherwise they run in order on the calling thread.
//! Results come back in input order either way.

use crate::error::{Error, Result};

pub fn map<T, R, F>(jobs: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if jobs > 1 && items.len() > 1 {
        use rayon::prelude::*;
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => return pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()),
            Err(e) => log::warn!("thread pool unavailable ({e}); running sequentially"),
        }
    }
    #[cfg(not(feature = "parallel"))]
    if jobs > 1 {
        log::debug!("built without the parallel feature; ignoring jobs={jobs}");
    }
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Like [`map`], stopping at the first error in input order.
pub fn try_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync + Send,
{
    map(jobs, items, f).into_iter().collect::<std::result::Result<Vec<R>, Error>>()
}
