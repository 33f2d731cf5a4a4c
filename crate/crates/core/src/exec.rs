//! Order-preserving data-parallel map.
//!
//! With the `parallel` feature the rayon pool runs the closures; without it, or
//! with [`Parallelism::Sequential`], they run in a plain loop. Results always
//! come back in input order and every reduction downstream is performed in that
//! order, so outputs are identical across thread counts.

/// Execution strategy for batch-level work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    #[default]
    Rayon,
}

impl Parallelism {
    /// Whether this build can actually run in parallel.
    pub fn available() -> bool {
        cfg!(feature = "parallel")
    }
}

pub fn map<I, O, F>(par: Parallelism, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    match par {
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Like [`map`], short-circuiting on the first error in input order.
pub fn try_map<I, O, E, F>(par: Parallelism, items: &[I], f: F) -> Result<Vec<O>, E>
where
    I: Sync,
    O: Send,
    E: Send,
    F: Fn(&I) -> Result<O, E> + Sync + Send,
{
    map(par, items, f).into_iter().collect()
}

/// Installs a global pool of `threads` workers. Returns false if a pool was
/// already initialised or the build has no parallel support.
pub fn init_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}
