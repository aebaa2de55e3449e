//! Batches of independent simulations.
//!
//! Each simulation is sequential; a batch fans out across threads when the
//! `parallel` feature is on. Results come back in input order either way,
//! so a batch is as deterministic as its members.

use crate::scenario::{ResolvedScenario, ScenarioError};
use crate::sim::{simulate, SimError, SimResult, SimScenario};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every item, in parallel when enabled.
pub fn map_all<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential reference path, available regardless of features.
pub fn map_all_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

pub fn simulate_many(scenarios: &[SimScenario]) -> Vec<Result<SimResult, SimError>> {
    map_all(scenarios, simulate)
}

pub fn simulate_many_sequential(scenarios: &[SimScenario]) -> Vec<Result<SimResult, SimError>> {
    map_all_sequential(scenarios, simulate)
}

/// Runs resolved scenarios, including their resize plans.
pub fn run_many(scenarios: &[ResolvedScenario]) -> Vec<Result<SimResult, ScenarioError>> {
    map_all(scenarios, ResolvedScenario::run)
}

/// Runs `f` with at most `jobs` worker threads (0 means the default pool).
#[cfg(feature = "parallel")]
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    if jobs == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Without the `parallel` feature everything runs on the calling thread.
#[cfg(not(feature = "parallel"))]
pub fn with_jobs<R: Send>(_jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}
