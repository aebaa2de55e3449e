//! Discrete-event model of barrier-synchronised ranks under CFS control.
//!
//! Every rank is a single-threaded process. An iteration is split into `K`
//! equal compute chunks, each followed by a collective barrier that
//! completes when the last rank arrives plus a fixed network latency. Ranks
//! share their node by weighted max-min fairness (each capped at one core)
//! and, in hard-limit mode, are additionally bounded by a per-period CFS
//! quota. Time is integer microseconds; CPU work is tracked in
//! milli-core-microseconds so every quantity stays an exact integer.

mod engine;
mod fair;
mod oracle;
pub mod output;

use serde::{Deserialize, Serialize};

use crate::alloc::{AllocError, AllocationMode, CgroupParams, Quota};
use crate::rational::Rational;
use crate::scaling::PhaseSchedule;
use crate::SINGLE_THREAD_MILLICORES;

pub use engine::{RankProgress, Resize, Simulator, ThrottleCounters};
pub use fair::{fair_share, weighted_max_min, ShareClaim};
pub use oracle::{step_period_oracle, PeriodWalk};

/// Default usage sampling interval: five seconds of virtual time.
pub const DEFAULT_SAMPLE_INTERVAL_USEC: u64 = 5_000_000;

/// Default number of collectives per iteration.
pub const DEFAULT_COMM_ROUNDS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("node {node} has no capacity left for its ranks")]
    UnschedulableScenario { node: usize },
    #[error(
        "resize of rank {rank} to {request_millicores}m exceeds its {limit_millicores}m limit"
    )]
    ResizeConflict {
        rank: usize,
        request_millicores: u64,
        limit_millicores: u64,
    },
    #[error("invalid resize of rank {rank}: {reason}")]
    InvalidResize { rank: usize, reason: String },
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

/// How a rank waits inside a collective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BarrierWait {
    /// Sleeps; consumes no CPU until released.
    #[default]
    Block,
    /// Busy-polls at its full demand, as MPI progress engines do by
    /// default. Polling burns CFS quota.
    Spin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankProfile {
    pub cells: u64,
    /// CPU microseconds of work per cell per iteration.
    pub cost_per_cell_usec: Rational,
    #[serde(default = "default_rounds")]
    pub comm_rounds_per_iter: u32,
    pub node_id: usize,
    /// `cpu_weight` doubles as the rank's request in milli-cores.
    pub cgroup: CgroupParams,
    /// Consumption rate while runnable; a busy rank draws a full core.
    #[serde(default = "default_demand")]
    pub demand_millicores: u64,
}

fn default_rounds() -> u32 {
    DEFAULT_COMM_ROUNDS
}

fn default_demand() -> u64 {
    SINGLE_THREAD_MILLICORES
}

fn default_sample_interval() -> u64 {
    DEFAULT_SAMPLE_INTERVAL_USEC
}

impl RankProfile {
    /// Per-iteration work in milli-core-microseconds, rounded to nearest.
    pub fn work_per_iteration(&self) -> u64 {
        let numer = self.cells as u128 * self.cost_per_cell_usec.numer() as u128 * 1000;
        let denom = self.cost_per_cell_usec.denom() as u128;
        ((numer + denom / 2) / denom) as u64
    }

    pub fn request_millicores(&self) -> u64 {
        self.cgroup.cpu_weight
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub capacity_millicores: u64,
    #[serde(default)]
    pub resident_rank_ids: Vec<usize>,
    #[serde(default)]
    pub background_load_millicores: u64,
}

impl NodeSpec {
    pub fn new(capacity_millicores: u64) -> Self {
        NodeSpec {
            capacity_millicores,
            resident_rank_ids: Vec::new(),
            background_load_millicores: 0,
        }
    }

    pub fn available_millicores(&self) -> u64 {
        self.capacity_millicores
            .saturating_sub(self.background_load_millicores)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub ranks: Vec<RankProfile>,
    pub nodes: Vec<NodeSpec>,
    pub iterations: u64,
    pub mode: AllocationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_schedule: Option<PhaseSchedule>,
    #[serde(default)]
    pub barrier_latency_usec: u64,
    #[serde(default = "default_sample_interval")]
    pub sample_interval_usec: u64,
    #[serde(default)]
    pub barrier_wait: BarrierWait,
    /// Keep per-round barrier timings in the result.
    #[serde(default)]
    pub record_rounds: bool,
}

impl SimScenario {
    /// Fills in empty `resident_rank_ids` from the ranks' `node_id`s.
    pub fn with_derived_residency(mut self) -> Self {
        if self.nodes.iter().all(|n| n.resident_rank_ids.is_empty()) {
            for (i, rank) in self.ranks.iter().enumerate() {
                if let Some(node) = self.nodes.get_mut(rank.node_id) {
                    node.resident_rank_ids.push(i);
                }
            }
        }
        self
    }

    pub fn comm_rounds(&self) -> u32 {
        self.ranks
            .first()
            .map_or(DEFAULT_COMM_ROUNDS, |r| r.comm_rounds_per_iter)
    }

    /// Total planned work per rank in milli-core-microseconds.
    pub fn total_work(&self) -> Vec<u64> {
        self.ranks
            .iter()
            .map(|r| r.work_per_iteration() * self.iterations)
            .collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.ranks.is_empty() {
            return bad("no ranks".into());
        }
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.sample_interval_usec == 0 {
            return bad("sample interval must be positive".into());
        }
        let k = self.comm_rounds();
        for (i, r) in self.ranks.iter().enumerate() {
            if r.cells == 0 {
                return bad(format!("rank {i} has no cells"));
            }
            if r.cost_per_cell_usec.is_zero() {
                return bad(format!("rank {i} has zero cost per cell"));
            }
            if r.comm_rounds_per_iter == 0 {
                return bad(format!("rank {i} has zero communication rounds"));
            }
            if r.comm_rounds_per_iter != k {
                return bad("all ranks must share the same number of communication rounds".into());
            }
            if r.demand_millicores == 0 || r.demand_millicores > SINGLE_THREAD_MILLICORES {
                return bad(format!("rank {i} demand must be in 1..=1000 millicores"));
            }
            if r.node_id >= self.nodes.len() {
                return bad(format!("rank {i} refers to missing node {}", r.node_id));
            }
            if r.cgroup.period_usec == 0 {
                return bad(format!("rank {i} has a zero CFS period"));
            }
            if r.cgroup.cpu_weight == 0 {
                return bad(format!("rank {i} has a zero cpu weight"));
            }
            match (self.mode, r.cgroup.quota_usec) {
                (AllocationMode::HardLimits, Quota::Unlimited) => {
                    return bad(format!("rank {i} has no quota in hard-limit mode"))
                }
                (AllocationMode::RequestsOnly, Quota::Bounded(_)) => {
                    return bad(format!("rank {i} has a quota in requests-only mode"))
                }
                _ => {}
            }
        }
        let mut seen = vec![0usize; self.ranks.len()];
        for (n, node) in self.nodes.iter().enumerate() {
            if node.capacity_millicores == 0 {
                return bad(format!("node {n} has zero capacity"));
            }
            for &r in &node.resident_rank_ids {
                if r >= self.ranks.len() {
                    return bad(format!("node {n} lists missing rank {r}"));
                }
                if self.ranks[r].node_id != n {
                    return bad(format!(
                        "rank {r} is listed on node {n} but assigned to node {}",
                        self.ranks[r].node_id
                    ));
                }
                seen[r] += 1;
            }
        }
        if let Some(r) = seen.iter().position(|&c| c != 1) {
            return bad(format!("rank {r} must be resident on exactly one node"));
        }
        for (n, node) in self.nodes.iter().enumerate() {
            if !node.resident_rank_ids.is_empty() && node.available_millicores() == 0 {
                return Err(SimError::UnschedulableScenario { node: n });
            }
        }
        if let Some(schedule) = &self.phase_schedule {
            schedule
                .validate()
                .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
            if schedule.rank_count() != self.ranks.len() {
                return bad("phase schedule rank count differs from scenario".into());
            }
            if schedule.mode() != self.mode {
                return bad("phase schedule mode differs from scenario".into());
            }
        }
        Ok(())
    }
}

/// One point of a usage timeline: average milli-cores over the window
/// ending at `time_usec` (the first point is the instantaneous rate at 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageSample {
    pub time_usec: u64,
    pub millicores: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResult {
    pub nr_throttled: u64,
    pub throttled_usec: u64,
    pub request_millicores: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit_millicores: Option<u64>,
    /// Useful work done, milli-core-microseconds.
    pub work_millicore_usec: u64,
    /// All CPU consumed including barrier polling, milli-core-microseconds.
    pub consumed_millicore_usec: u64,
    pub cpu_usage_series: Vec<UsageSample>,
}

impl RankResult {
    pub fn throttled_fraction(&self, wall_clock_usec: u64) -> f64 {
        if wall_clock_usec == 0 {
            0.0
        } else {
            self.throttled_usec as f64 / wall_clock_usec as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub capacity_millicores: u64,
    pub background_load_millicores: u64,
    pub resident_rank_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResizeEvent {
    pub rank: usize,
    pub requested_at_usec: u64,
    pub effective_usec: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub applied_at_usec: Option<u64>,
    pub request_millicores: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit_millicores: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub iteration: u64,
    pub round: u32,
    pub start_usec: u64,
    /// When each rank finished its chunk for this round.
    pub completion_usec: Vec<u64>,
    pub released_usec: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimResult {
    pub mode: AllocationMode,
    pub wall_clock_usec: u64,
    pub iterations_completed: u64,
    pub comm_rounds_per_iter: u32,
    pub barrier_latency_usec: u64,
    pub per_rank: Vec<RankResult>,
    pub per_iteration_wall_usec: Vec<u64>,
    pub nodes: Vec<NodeSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resizes: Vec<ResizeEvent>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rounds: Vec<RoundRecord>,
}

impl SimResult {
    pub fn total_throttle_events(&self) -> u64 {
        self.per_rank.iter().map(|r| r.nr_throttled).sum()
    }

    pub fn requests_millicores(&self) -> Vec<u64> {
        self.per_rank.iter().map(|r| r.request_millicores).collect()
    }
}

/// Runs a scenario to completion.
pub fn simulate(scenario: &SimScenario) -> Result<SimResult, SimError> {
    Simulator::with_schedule(scenario)?.run_to_completion()
}
