//! Order-preserving data-parallel map used for per-query and per-triple work.
//!
//! With the `parallel` feature the work runs on a dedicated rayon pool of
//! `jobs` threads; without it (or with `jobs == 1`) it runs inline. Results
//! always come back in input order, so output is identical for every `jobs`.

use std::fmt;
use std::num::NonZeroUsize;
use std::str::FromStr;

/// Worker-thread count for data-parallel stages. `Jobs::SEQUENTIAL` is the
/// determinism baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Jobs(NonZeroUsize);

impl Jobs {
    pub const SEQUENTIAL: Jobs = Jobs(NonZeroUsize::MIN);

    pub fn new(n: usize) -> Option<Jobs> {
        NonZeroUsize::new(n).map(Jobs)
    }

    /// One job per available core.
    pub fn available() -> Jobs {
        Jobs(std::thread::available_parallelism().unwrap_or(NonZeroUsize::MIN))
    }

    pub fn get(self) -> usize {
        self.0.get()
    }

    pub fn is_sequential(self) -> bool {
        self.0.get() == 1
    }
}

impl Default for Jobs {
    fn default() -> Self {
        Jobs::SEQUENTIAL
    }
}

impl fmt::Display for Jobs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for Jobs {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let n: usize = s.trim().parse().map_err(|_| format!("invalid job count `{s}`"))?;
        Jobs::new(n).ok_or_else(|| "job count must be at least 1".to_string())
    }
}

/// Maps `f` over `items`, returning results in input order.
pub fn map<T, R, F>(items: &[T], jobs: Jobs, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if jobs.is_sequential() || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    parallel_map(items, jobs, f)
}

/// Like [`map`] for fallible work; the first error in input order wins.
pub fn try_map<T, R, E, F>(items: &[T], jobs: Jobs, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(items, jobs, f).into_iter().collect()
}

#[cfg(feature = "parallel")]
fn parallel_map<T, R, F>(items: &[T], jobs: Jobs, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;

    match rayon::ThreadPoolBuilder::new().num_threads(jobs.get()).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        // Thread spawn failure: degrade to the sequential path.
        Err(_) => items.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, R, F>(items: &[T], _jobs: Jobs, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}
