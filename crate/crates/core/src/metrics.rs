//! Resource-efficiency metrics over usage timelines and simulation results.
//!
//! Integrals are exact: usage is piecewise linear between samples, so the
//! trapezoid rule over integer microseconds and milli-cores is a rational
//! number of core-seconds.

use std::fmt::Write as _;
use std::io::Read;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::alloc::AllocationPlan;
use crate::sim::{NodeSpec, SimResult, UsageSample};

/// Exact non-negative rational.
pub type Exact = Ratio<u128>;

const MILLICORE_USEC_PER_CORE_SECOND: u128 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("usage series for rank {rank} is empty")]
    EmptySeries { rank: usize },
    #[error("usage series for rank {rank} is not strictly increasing at sample {index}")]
    NonMonotonic { rank: usize, index: usize },
    #[error("usage series for rank {rank} has a sample at {time_usec}us, past the {horizon_usec}us horizon")]
    PastHorizon {
        rank: usize,
        time_usec: u64,
        horizon_usec: u64,
    },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("malformed usage CSV at line {line}: {reason}")]
    MalformedCsv { line: u64, reason: String },
    #[error("usage CSV has no rows for rank {0}")]
    RankGap(usize),
    #[error("placement refers to missing node {0}")]
    MissingNode(usize),
}

/// Sampled usage of one rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageSeries {
    samples: Vec<UsageSample>,
}

impl UsageSeries {
    /// Checks that timestamps strictly increase. `rank` labels errors.
    pub fn new(samples: Vec<UsageSample>, rank: usize) -> Result<Self, MetricsError> {
        if let Some(i) = samples
            .windows(2)
            .position(|w| w[0].time_usec >= w[1].time_usec)
        {
            return Err(MetricsError::NonMonotonic { rank, index: i + 1 });
        }
        Ok(UsageSeries { samples })
    }

    pub fn samples(&self) -> &[UsageSample] {
        &self.samples
    }

    /// Trapezoid integral over `[t0, horizon]` in milli-core-microseconds,
    /// doubled to stay integral. The last value holds until the horizon.
    fn doubled_integral(&self, rank: usize, horizon_usec: u64) -> Result<u128, MetricsError> {
        let last = self
            .samples
            .last()
            .ok_or(MetricsError::EmptySeries { rank })?;
        if last.time_usec > horizon_usec {
            return Err(MetricsError::PastHorizon {
                rank,
                time_usec: last.time_usec,
                horizon_usec,
            });
        }
        let inner: u128 = self
            .samples
            .windows(2)
            .map(|w| {
                (w[0].millicores + w[1].millicores) as u128
                    * (w[1].time_usec - w[0].time_usec) as u128
            })
            .sum();
        let tail = 2 * last.millicores as u128 * (horizon_usec - last.time_usec) as u128;
        Ok(inner + tail)
    }
}

pub fn series_of(result: &SimResult) -> Vec<UsageSeries> {
    result
        .per_rank
        .iter()
        .map(|r| UsageSeries {
            samples: r.cpu_usage_series.clone(),
        })
        .collect()
}

/// Total CPU time `H` in core-seconds, summed over ranks.
///
/// Each series is integrated by the trapezoid rule from its first sample to
/// `horizon_usec`; a single sample counts as constant over that span.
pub fn cpu_hours(series: &[UsageSeries], horizon_usec: u64) -> Result<Exact, MetricsError> {
    let mut doubled = 0u128;
    for (rank, s) in series.iter().enumerate() {
        doubled += s.doubled_integral(rank, horizon_usec)?;
    }
    Ok(Ratio::new(doubled, 2 * MILLICORE_USEC_PER_CORE_SECOND))
}

/// Alias of [`cpu_hours`]; the unit is core-seconds either way.
pub fn cpu_seconds(series: &[UsageSeries], horizon_usec: u64) -> Result<Exact, MetricsError> {
    cpu_hours(series, horizon_usec)
}

/// `eta = H_baseline / H_config`.
pub fn resource_efficiency(h_baseline: Exact, h_config: Exact) -> Result<Exact, MetricsError> {
    if h_baseline.is_zero() {
        return Err(MetricsError::NonPositive("baseline CPU time"));
    }
    if h_config.is_zero() {
        return Err(MetricsError::NonPositive("configuration CPU time"));
    }
    Ok(h_baseline / h_config)
}

/// `S = T_serial / T_config` and `E = S / cores`.
pub fn speedup_and_parallel_efficiency(
    t_serial_usec: u64,
    t_config_usec: u64,
    total_alloc_millicores: u64,
) -> Result<(Exact, Exact), MetricsError> {
    if t_serial_usec == 0 {
        return Err(MetricsError::NonPositive("serial time"));
    }
    if t_config_usec == 0 {
        return Err(MetricsError::NonPositive("configuration time"));
    }
    if total_alloc_millicores == 0 {
        return Err(MetricsError::NonPositive("total allocation"));
    }
    let s = Ratio::new(t_serial_usec as u128, t_config_usec as u128);
    let e = s * Ratio::new(1000, total_alloc_millicores as u128);
    Ok((s, e))
}

/// Ranks of one plan pinned to nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub plan: AllocationPlan,
    /// Node index per rank.
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeHeadroom {
    pub capacity_millicores: u64,
    pub requested_millicores: u64,
    /// Capacity minus requests; negative when over-committed.
    pub free_millicores: i64,
    pub over_committed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingReport {
    pub per_node: Vec<NodeHeadroom>,
    /// Sum of free capacity over nodes that are not over-committed.
    pub total_free_millicores: u64,
    pub over_committed: bool,
}

/// Free capacity per node after placing every plan's requests.
pub fn packing_headroom(
    nodes: &[NodeSpec],
    placements: &[Placement],
) -> Result<PackingReport, MetricsError> {
    let mut requested = vec![0u64; nodes.len()];
    for p in placements {
        for (rank, &node) in p.nodes.iter().enumerate() {
            let slot = requested
                .get_mut(node)
                .ok_or(MetricsError::MissingNode(node))?;
            *slot += p.plan.requests_millicores.get(rank).copied().unwrap_or(0);
        }
    }
    Ok(headroom_from(
        nodes.iter().map(|n| n.capacity_millicores).zip(requested),
    ))
}

fn headroom_from(nodes: impl Iterator<Item = (u64, u64)>) -> PackingReport {
    let per_node: Vec<NodeHeadroom> = nodes
        .map(|(capacity, requested)| NodeHeadroom {
            capacity_millicores: capacity,
            requested_millicores: requested,
            free_millicores: capacity as i64 - requested as i64,
            over_committed: requested > capacity,
        })
        .collect();
    PackingReport {
        total_free_millicores: per_node
            .iter()
            .map(|n| n.free_millicores.max(0) as u64)
            .sum(),
        over_committed: per_node.iter().any(|n| n.over_committed),
        per_node,
    }
}

/// Node headroom implied by a simulation's initial requests.
pub fn result_headroom(result: &SimResult) -> PackingReport {
    headroom_from(result.nodes.iter().map(|n| {
        let requested = n
            .resident_rank_ids
            .iter()
            .map(|&r| result.per_rank[r].request_millicores)
            .sum();
        (n.capacity_millicores, requested)
    }))
}

/// Requests released when moving from `baseline` to `candidate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReclaimedRequests {
    /// From the ranks holding the candidate's smallest request.
    pub far_field_millicores: u64,
    /// From every rank whose request went down.
    pub gross_millicores: u64,
    /// Baseline total minus candidate total.
    pub net_millicores: i64,
}

/// Rank-wise comparison of two request vectors of equal length.
pub fn reclaimed_millicores(baseline: &[u64], candidate: &[u64]) -> ReclaimedRequests {
    assert_eq!(
        baseline.len(),
        candidate.len(),
        "request vectors differ in length"
    );
    let freed = |i: usize| baseline[i].saturating_sub(candidate[i]);
    let smallest = candidate.iter().copied().min().unwrap_or(0);
    ReclaimedRequests {
        far_field_millicores: (0..candidate.len())
            .filter(|&i| candidate[i] == smallest)
            .map(freed)
            .sum(),
        gross_millicores: (0..candidate.len()).map(freed).sum(),
        net_millicores: baseline.iter().sum::<u64>() as i64 - candidate.iter().sum::<u64>() as i64,
    }
}

/// Metrics of one configuration, optionally relative to a baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub wall_clock_usec: u64,
    #[serde(with = "exact_str")]
    pub cpu_seconds_total: Exact,
    #[serde(with = "exact_str")]
    pub efficiency: Exact,
    /// Baseline wall clock over this wall clock.
    #[serde(with = "exact_str")]
    pub relative_speed: Exact,
    /// Against a one-core run of the same work without communication.
    #[serde(with = "exact_str")]
    pub speedup: Exact,
    /// Speedup per requested core.
    #[serde(with = "exact_str")]
    pub parallel_efficiency: Exact,
    pub n_effective_millicores: u64,
    /// Speedup per core actually consumed on average.
    #[serde(with = "exact_str")]
    pub parallel_efficiency_consumed: Exact,
    pub n_effective_consumed_millicores: u64,
    pub throttle_events: u64,
    pub headroom_millicores_per_node: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reclaimed: Option<ReclaimedRequests>,
}

/// One-core time for all of a run's useful work, rounded up.
pub fn serial_time_usec(result: &SimResult) -> u64 {
    result
        .per_rank
        .iter()
        .map(|r| r.work_millicore_usec)
        .sum::<u64>()
        .div_ceil(1000)
}

/// Builds the report for `result`. Without a baseline the run is its own
/// baseline.
pub fn build_report(
    label: &str,
    result: &SimResult,
    baseline: Option<&SimResult>,
) -> Result<MetricsReport, MetricsError> {
    let base = baseline.unwrap_or(result);
    let h = cpu_hours(&series_of(result), result.wall_clock_usec)?;
    let h_base = cpu_hours(&series_of(base), base.wall_clock_usec)?;
    let efficiency = resource_efficiency(h_base, h)?;
    if result.wall_clock_usec == 0 {
        return Err(MetricsError::NonPositive("wall clock"));
    }
    let relative_speed = Ratio::new(base.wall_clock_usec as u128, result.wall_clock_usec as u128);

    let requested: u64 = result.requests_millicores().iter().sum();
    let (speedup, parallel_efficiency) = speedup_and_parallel_efficiency(
        serial_time_usec(result),
        result.wall_clock_usec,
        requested,
    )?;
    let consumed: u64 = result
        .per_rank
        .iter()
        .map(|r| r.consumed_millicore_usec)
        .sum();
    let n_consumed = consumed.div_ceil(result.wall_clock_usec).max(1);
    let (_, parallel_efficiency_consumed) = speedup_and_parallel_efficiency(
        serial_time_usec(result),
        result.wall_clock_usec,
        n_consumed,
    )?;

    let reclaimed = baseline
        .filter(|b| b.per_rank.len() == result.per_rank.len())
        .map(|b| reclaimed_millicores(&b.requests_millicores(), &result.requests_millicores()));
    Ok(MetricsReport {
        label: label.to_string(),
        wall_clock_usec: result.wall_clock_usec,
        cpu_seconds_total: h,
        efficiency,
        relative_speed,
        speedup,
        parallel_efficiency,
        n_effective_millicores: requested,
        parallel_efficiency_consumed,
        n_effective_consumed_millicores: n_consumed,
        throttle_events: result.total_throttle_events(),
        headroom_millicores_per_node: result_headroom(result)
            .per_node
            .iter()
            .map(|n| n.free_millicores)
            .collect(),
        reclaimed,
    })
}

pub fn to_f64(x: Exact) -> f64 {
    x.numer().to_f64().unwrap_or(f64::NAN) / x.denom().to_f64().unwrap_or(f64::NAN)
}

/// Plain-text comparison table, one row per report.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<22} {:>12} {:>12} {:>8} {:>9} {:>8} {:>8} {:>8} {:>10} {:>10} {:>10}",
        "config",
        "T (s)",
        "H (core-s)",
        "eta",
        "T0/T",
        "S",
        "E req",
        "E used",
        "throttles",
        "headroom",
        "reclaimed"
    );
    for r in reports {
        let headroom: i64 = r.headroom_millicores_per_node.iter().sum();
        let reclaimed = r.reclaimed.map_or_else(
            || "-".to_string(),
            |x| format!("{}m", x.far_field_millicores),
        );
        let _ = writeln!(
            out,
            "{:<22} {:>12.3} {:>12.3} {:>8.3} {:>9.3} {:>8.3} {:>8.3} {:>8.3} {:>10} {:>9}m {:>10}",
            r.label,
            r.wall_clock_usec as f64 / 1e6,
            to_f64(r.cpu_seconds_total),
            to_f64(r.efficiency),
            to_f64(r.relative_speed),
            to_f64(r.speedup),
            to_f64(r.parallel_efficiency),
            to_f64(r.parallel_efficiency_consumed),
            r.throttle_events,
            headroom,
            reclaimed,
        );
    }
    out
}

#[derive(Deserialize)]
struct UsageRow {
    time_usec: u64,
    rank: usize,
    millicores: u64,
}

/// Reads the long-format `time_usec,rank,millicores` timeline, as written
/// by the simulator or exported from a real cluster. Ranks must be
/// contiguous from zero; rows may be interleaved.
pub fn read_usage_csv<R: Read>(input: R) -> Result<Vec<UsageSeries>, MetricsError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut by_rank: Vec<Vec<UsageSample>> = Vec::new();
    for row in reader.deserialize::<UsageRow>() {
        let row = row.map_err(|e| MetricsError::MalformedCsv {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        if row.rank >= by_rank.len() {
            by_rank.resize_with(row.rank + 1, Vec::new);
        }
        by_rank[row.rank].push(UsageSample {
            time_usec: row.time_usec,
            millicores: row.millicores,
        });
    }
    by_rank
        .into_iter()
        .enumerate()
        .map(|(rank, samples)| {
            if samples.is_empty() {
                Err(MetricsError::RankGap(rank))
            } else {
                UsageSeries::new(samples, rank)
            }
        })
        .collect()
}

mod exact_str {
    use super::Exact;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &Exact, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(x)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Exact, D::Error> {
        let text = String::deserialize(d)?;
        crate::alloc::fraction_list::parse(&text)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid rational `{text}`")))
    }
}
