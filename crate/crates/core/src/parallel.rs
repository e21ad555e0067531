use rayon::prelude::*;

use crate::error::{Error, Result};

/// Handle to the worker pool owned by the caller.
///
/// Library routines never spawn threads of their own; they fan work out
/// through this handle. Results are always returned in input order, so
/// outputs do not depend on the worker count.
pub struct Workers {
    pool: rayon::ThreadPool,
    count: usize,
}

impl Workers {
    pub fn new(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(count)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool, count })
    }

    pub fn single() -> Self {
        Self::new(1).expect("single worker pool")
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Maps `f` over `items` on the pool, preserving order.
    pub fn map<I, R, F>(&self, items: &[I], f: F) -> Vec<R>
    where
        I: Sync,
        R: Send,
        F: Fn(&I) -> R + Sync + Send,
    {
        self.pool.install(|| items.par_iter().map(&f).collect())
    }

    /// Like [`Workers::map`] but stops at the first error (in input order).
    pub fn try_map<I, R, F>(&self, items: &[I], f: F) -> Result<Vec<R>>
    where
        I: Sync,
        R: Send,
        F: Fn(&I) -> Result<R> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

impl std::fmt::Debug for Workers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workers").field("count", &self.count).finish()
    }
}
