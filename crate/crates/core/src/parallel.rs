//! Data-parallel execution with a sequential fallback.
//!
//! Every reduction goes through fixed-size chunks whose partial results are
//! merged in chunk order, so `Sequential` and `Parallel` produce bit-identical
//! output regardless of thread count. Without the `parallel` feature both modes
//! run sequentially.

use serde::{Deserialize, Serialize};

/// Environment variable capping the worker count of the internal pool.
pub const THREADS_ENV: &str = "EEDN_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

#[cfg(feature = "parallel")]
mod pool {
    use once_cell::sync::Lazy;
    use rayon::{ThreadPool, ThreadPoolBuilder};

    pub(super) static POOL: Lazy<ThreadPool> = Lazy::new(|| {
        let threads = std::env::var(super::THREADS_ENV)
            .ok()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            });
        ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("could not spawn worker threads")
    });
}

/// Number of worker threads parallel mode will use.
pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        pool::POOL.current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Order-preserving map.
pub fn map_collect<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return pool::POOL.install(|| items.par_iter().map(&f).collect());
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Folds `items` chunk by chunk, then merges chunk partials left to right.
pub fn chunked_fold<T, A, I, F, M>(
    mode: ExecMode,
    items: &[T],
    chunk: usize,
    init: I,
    fold: F,
    merge: M,
) -> A
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, &T) + Sync + Send,
    M: Fn(&mut A, A),
{
    let chunk = chunk.max(1);
    let run_chunk = |c: &[T]| {
        let mut acc = init();
        for item in c {
            fold(&mut acc, item);
        }
        acc
    };
    let partials: Vec<A> = {
        #[cfg(feature = "parallel")]
        {
            if mode.is_parallel() {
                use rayon::prelude::*;
                pool::POOL.install(|| items.par_chunks(chunk).map(run_chunk).collect())
            } else {
                items.chunks(chunk).map(run_chunk).collect()
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = mode;
            items.chunks(chunk).map(run_chunk).collect()
        }
    };
    let mut it = partials.into_iter();
    let mut total = it.next().unwrap_or_else(&init);
    for p in it {
        merge(&mut total, p);
    }
    total
}
