//! Rank-aware CPU provisioning for tightly coupled MPI solvers running in
//! containers.
//!
//! The crate is organised around the life cycle of a provisioning decision:
//!
//! * [`alloc`] turns decomposition weights into exact-sum milli-core requests
//!   and the matching CFS `cpu.max` / `cpu.weight` parameters.
//! * [`sim`] replays barrier-synchronised ranks on capacity-bounded nodes
//!   under CFS bandwidth control, in integer microseconds of virtual time.
//! * [`scaling`] describes time-phased allocations and the in-place resize
//!   patches that realise them.
//! * [`metrics`] integrates usage series into core-seconds and derives
//!   efficiency, speedup and packing headroom.
//! * [`artifacts`] reads and writes the pod manifests, weight lists and
//!   decomposition reports that sit at the edges of the workflow.
//! * [`scenario`] is the JSON scenario file format and the bundled examples.
//! * [`sweep`] runs batches of independent simulations, in parallel when the
//!   `parallel` feature is enabled.

pub mod alloc;
pub mod artifacts;
pub mod metrics;
pub mod rational;
pub mod scaling;
pub mod scenario;
pub mod sim;
pub mod sweep;

pub use alloc::{AllocationMode, AllocationPlan, CgroupParams, Quota, WeightVector};
pub use rational::Rational;
pub use sim::{simulate, SimResult, SimScenario};

/// Microseconds in one CFS period unless configured otherwise.
pub const DEFAULT_PERIOD_USEC: u64 = 100_000;

/// Single-threaded ranks never consume more than one core.
pub const SINGLE_THREAD_MILLICORES: u64 = 1000;
