//! Bounded worker pools. Gradient batches and per-target scoring fan out
//! across threads, but results are always reduced in input order, so a
//! run with N threads is bit-identical to the single-threaded reference.

use indret_core::network::{Model, SampleGrad, TrainPair};
use indret_core::CoreError;
use rayon::prelude::*;

use crate::error::{AppError, Result};

/// Builds a rayon pool with the requested number of threads (0 = rayon's
/// default).
pub fn make_pool(threads: usize) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if threads > 0 {
        builder = builder.num_threads(threads);
    }
    builder
        .build()
        .map_err(|e| AppError::Config(format!("thread pool: {e}")))
}

/// Per-sample gradients computed in parallel; the output vector keeps the
/// batch order, so the summed update matches the sequential mapper.
pub fn parallel_grad_map(
    pool: &rayon::ThreadPool,
    model: &Model,
    batch: &[&TrainPair],
) -> std::result::Result<Vec<SampleGrad>, CoreError> {
    pool.install(|| {
        batch
            .par_iter()
            .map(|p| model.pair_grad(&p.input, p.relevant))
            .collect()
    })
}

/// Order-preserving parallel map over an index range.
pub fn ordered_map<T, F>(pool: &rayon::ThreadPool, count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    pool.install(|| (0..count).into_par_iter().map(&f).collect())
}
