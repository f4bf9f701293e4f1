//! Sequential / data-parallel execution switch.
//!
//! Every per-sample loop in the crate goes through [`Execution`], so a single
//! flag decides whether work fans out over the rayon pool. Results are always
//! collected in input order and reductions happen afterwards in that order,
//! which keeps outputs bit-identical between the two modes.
//!
//! Without the `parallel` feature, [`Execution::Parallel`] degrades to the
//! sequential path.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this build can actually run in parallel.
    pub const fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect(),
            _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        }
    }

    /// Runs `f` on consecutive `chunk`-sized pieces of `data`, passing the chunk index.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if chunk == 0 {
            return;
        }
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
            _ => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
        }
    }
}

impl Execution {
    /// Like [`Execution::for_each_chunk_mut`], collecting one result per chunk in order.
    pub fn map_chunks_mut<T, R, F>(self, data: &mut [T], chunk: usize, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(usize, &mut [T]) -> R + Sync + Send,
    {
        if chunk == 0 {
            return Vec::new();
        }
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => data.par_chunks_mut(chunk).enumerate().map(|(i, c)| f(i, c)).collect(),
            _ => data.chunks_mut(chunk).enumerate().map(|(i, c)| f(i, c)).collect(),
        }
    }
}

/// Configures the global rayon pool from `LEXNET_THREADS` when set.
///
/// Returns the thread count in effect. Safe to call more than once; only the
/// first successful call installs a pool.
pub fn init_threads_from_env() -> usize {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = std::env::var("LEXNET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
