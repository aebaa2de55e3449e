#![allow(dead_code)]

use proptest::test_runner::{Config, FileFailurePersistence, RngAlgorithm, TestRng, TestRunner};
use rankshare::alloc::{quota_for_limit, AllocationMode, CgroupParams};
use rankshare::sim::{BarrierWait, NodeSpec, RankProfile, SimScenario};
use rankshare::Rational;

pub fn hard(limit: u64) -> CgroupParams {
    quota_for_limit(limit, 100_000).unwrap()
}

pub fn rank(cells: u64, cgroup: CgroupParams, k: u32) -> RankProfile {
    RankProfile {
        cells,
        cost_per_cell_usec: Rational::integer(1),
        comm_rounds_per_iter: k,
        node_id: 0,
        cgroup,
        demand_millicores: 1000,
    }
}

/// All ranks on one node.
pub fn one_node(
    ranks: Vec<RankProfile>,
    capacity: u64,
    mode: AllocationMode,
    iterations: u64,
) -> SimScenario {
    SimScenario {
        ranks,
        nodes: vec![NodeSpec::new(capacity)],
        iterations,
        mode,
        phase_schedule: None,
        barrier_latency_usec: 0,
        sample_interval_usec: 5_000_000,
        barrier_wait: BarrierWait::Block,
        record_rounds: false,
    }
    .with_derived_residency()
}

/// Seeded runner so failures reproduce across runs.
pub fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: Some(Box::new(FileFailurePersistence::Off)),
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}
