//! Thread-count control for the data-parallel helpers.
//!
//! Work is always split into the same chunks and results are gathered in
//! input order, so the thread count never changes a result; `1` (the
//! default) simply runs everything on the calling thread.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

static THREADS: AtomicUsize = AtomicUsize::new(1);
static POOL: Mutex<Option<(usize, Arc<ThreadPool>)>> = Mutex::new(None);

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::SeqCst);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

fn pool(n: usize) -> Arc<ThreadPool> {
    let mut guard = POOL.lock().unwrap_or_else(|e| e.into_inner());
    match &*guard {
        Some((k, p)) if *k == n => p.clone(),
        _ => {
            let p = Arc::new(
                ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("thread pool"),
            );
            *guard = Some((n, p.clone()));
            p
        }
    }
}

/// Order-preserving map over `items`, parallel when more than one thread is
/// configured.
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    let n = threads();
    if n <= 1 || items.len() <= 1 {
        items.iter().map(f).collect()
    } else {
        pool(n).install(|| items.par_iter().map(f).collect())
    }
}
