//! Time-phased allocations and in-place resize plans.
//!
//! A [`PhaseSchedule`] holds three allocation plans: peak before `t1`,
//! development between `t1` and `t2`, steady state from `t2` on. A
//! [`PatchPlan`] is the list of resize operations that realise a schedule;
//! it can be replayed inside the simulator or rendered as operator
//! commands.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alloc::{AllocationMode, AllocationPlan};
use crate::sim::{Resize, SimError, SimResult, SimScenario, Simulator};

/// Kubelet sync delay between a patch and the cgroup write.
pub const DEFAULT_SYNC_DELAY_USEC: u64 = 5_000_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScalingError {
    #[error("invalid phase schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid patch plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub t1_usec: u64,
    pub t2_usec: u64,
    pub alloc_max: AllocationPlan,
    pub alloc_mid: AllocationPlan,
    pub alloc_min: AllocationPlan,
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<(), ScalingError> {
        let bad = |m: &str| Err(ScalingError::InvalidSchedule(m.to_string()));
        if self.t1_usec == 0 || self.t1_usec >= self.t2_usec {
            return bad("phase boundaries must satisfy 0 < t1 < t2");
        }
        let n = self.alloc_max.len();
        if self.alloc_mid.len() != n || self.alloc_min.len() != n {
            return bad("phase plans differ in rank count");
        }
        let mode = self.alloc_max.mode;
        if self.alloc_mid.mode != mode || self.alloc_min.mode != mode {
            return bad("phase plans differ in allocation mode");
        }
        for plan in [&self.alloc_max, &self.alloc_mid, &self.alloc_min] {
            plan.validate()
                .map_err(|e| ScalingError::InvalidSchedule(e.to_string()))?;
        }
        Ok(())
    }

    pub fn rank_count(&self) -> usize {
        self.alloc_max.len()
    }

    pub fn mode(&self) -> AllocationMode {
        self.alloc_max.mode
    }

    /// The two phase changes, in time order.
    pub fn transitions(&self) -> [(u64, &AllocationPlan); 2] {
        [
            (self.t1_usec, &self.alloc_mid),
            (self.t2_usec, &self.alloc_min),
        ]
    }

    /// Integrated provisioned CPU over `[0, horizon)`, milli-core-µs.
    pub fn provisioned_millicore_usec(&self, horizon_usec: u64) -> u128 {
        let t1 = self.t1_usec.min(horizon_usec);
        let t2 = self.t2_usec.min(horizon_usec);
        t1 as u128 * self.alloc_max.total_requests() as u128
            + (t2 - t1) as u128 * self.alloc_mid.total_requests() as u128
            + (horizon_usec - t2) as u128 * self.alloc_min.total_requests() as u128
    }
}

/// Allocation in force at time `t_usec`; intervals are closed on the left.
pub fn phase_allocation(t_usec: u64, schedule: &PhaseSchedule) -> &AllocationPlan {
    if t_usec < schedule.t1_usec {
        &schedule.alloc_max
    } else if t_usec < schedule.t2_usec {
        &schedule.alloc_mid
    } else {
        &schedule.alloc_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trigger {
    AtTime(u64),
    AtIteration(u64),
    AtProgressFraction(f64),
}

impl Trigger {
    fn kind(&self) -> u8 {
        match self {
            Trigger::AtTime(_) => 0,
            Trigger::AtIteration(_) => 1,
            Trigger::AtProgressFraction(_) => 2,
        }
    }

    fn key(&self) -> f64 {
        match *self {
            Trigger::AtTime(t) => t as f64,
            Trigger::AtIteration(n) => n as f64,
            Trigger::AtProgressFraction(f) => f,
        }
    }
}

impl std::fmt::Display for Trigger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Trigger::AtTime(t) => write!(f, "at time {t}us"),
            Trigger::AtIteration(n) => write!(f, "at iteration {n}"),
            Trigger::AtProgressFraction(p) => write!(f, "at progress {p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub trigger: Trigger,
    pub targets: Vec<usize>,
    /// Index-aligned with `targets`.
    pub new_requests_millicores: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_limits_millicores: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub entries: Vec<PatchEntry>,
}

impl PatchPlan {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<(), ScalingError> {
        let bad = |m: String| Err(ScalingError::InvalidPlan(m));
        for (i, e) in self.entries.iter().enumerate() {
            if e.targets.is_empty() {
                return bad(format!("entry {i} has no targets"));
            }
            if e.new_requests_millicores.len() != e.targets.len() {
                return bad(format!("entry {i} request count differs from target count"));
            }
            if let Some(l) = &e.new_limits_millicores {
                if l.len() != e.targets.len() {
                    return bad(format!("entry {i} limit count differs from target count"));
                }
            }
            if let Trigger::AtProgressFraction(f) = e.trigger {
                if !(0.0..=1.0).contains(&f) {
                    return bad(format!("entry {i} progress fraction outside [0, 1]"));
                }
            }
        }
        for pair in self.entries.windows(2) {
            if pair[0].trigger.kind() != pair[1].trigger.kind() {
                return bad("entries mix trigger kinds".into());
            }
            if pair[0].trigger.key() >= pair[1].trigger.key() {
                return bad("triggers must be strictly increasing".into());
            }
        }
        Ok(())
    }
}

fn entry_for(trigger: Trigger, plan: &AllocationPlan) -> PatchEntry {
    PatchEntry {
        trigger,
        targets: (0..plan.len()).collect(),
        new_requests_millicores: plan.requests_millicores.clone(),
        new_limits_millicores: plan.limits_millicores.clone(),
    }
}

/// Patches that move every rank through the schedule's phases at `t1` and
/// `t2`. Phases whose allocation equals the previous one are skipped.
pub fn build_patch_plan(schedule: &PhaseSchedule) -> Result<PatchPlan, ScalingError> {
    build_patch_plan_with_triggers(
        schedule,
        Trigger::AtTime(schedule.t1_usec),
        Trigger::AtTime(schedule.t2_usec),
    )
}

/// Like [`build_patch_plan`] with caller-chosen triggers for the two phase
/// changes (e.g. iteration counts instead of times).
pub fn build_patch_plan_with_triggers(
    schedule: &PhaseSchedule,
    first: Trigger,
    second: Trigger,
) -> Result<PatchPlan, ScalingError> {
    schedule.validate()?;
    let mut entries = Vec::new();
    if schedule.alloc_mid != schedule.alloc_max {
        entries.push(entry_for(first, &schedule.alloc_mid));
    }
    if schedule.alloc_min != schedule.alloc_mid {
        entries.push(entry_for(second, &schedule.alloc_min));
    }
    let plan = PatchPlan { entries };
    plan.validate()?;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProgressSource {
    IterationCounter,
    TimeDirectoryListing,
    LogLine,
}

/// How the monitor learns about progress. `staleness_usec` is how far
/// behind the true state its view is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressSignal {
    pub source: ProgressSource,
    #[serde(default)]
    pub staleness_usec: u64,
}

impl Default for ProgressSignal {
    fn default() -> Self {
        ProgressSignal {
            source: ProgressSource::IterationCounter,
            staleness_usec: 0,
        }
    }
}

/// Step function of true progress: `(time, fraction)` points, each value
/// holding until the next point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProgressTrace {
    points: Vec<(u64, f64)>,
}

impl ProgressTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a point; times must not go backwards.
    pub fn record(&mut self, time_usec: u64, fraction: f64) {
        debug_assert!(self.points.last().is_none_or(|&(t, _)| t <= time_usec));
        self.points.push((time_usec, fraction));
    }

    pub fn at(&self, time_usec: u64) -> f64 {
        let idx = self.points.partition_point(|&(t, _)| t <= time_usec);
        if idx == 0 {
            0.0
        } else {
            self.points[idx - 1].1
        }
    }

    /// First time the true progress reaches `threshold`.
    pub fn crossing(&self, threshold: f64) -> Option<u64> {
        if threshold <= 0.0 {
            return Some(0);
        }
        self.points
            .iter()
            .find(|&&(_, p)| p >= threshold)
            .map(|&(t, _)| t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    Fire,
    Hold,
}

/// Decides at `now_usec` whether a monitor watching `signal` has seen
/// progress reach `threshold`.
pub fn detect_transition(
    signal: &ProgressSignal,
    trace: &ProgressTrace,
    threshold: f64,
    now_usec: u64,
) -> Transition {
    if threshold <= 0.0 {
        return Transition::Fire;
    }
    let Some(seen_at) = now_usec.checked_sub(signal.staleness_usec) else {
        return Transition::Hold;
    };
    if trace.at(seen_at) >= threshold {
        Transition::Fire
    } else {
        Transition::Hold
    }
}

/// Earliest time `detect_transition` fires for this trace.
pub fn detection_time(
    signal: &ProgressSignal,
    trace: &ProgressTrace,
    threshold: f64,
) -> Option<u64> {
    if threshold <= 0.0 {
        return Some(0);
    }
    trace.crossing(threshold).map(|t| t + signal.staleness_usec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiredEntry {
    pub entry: usize,
    pub detected_at_usec: u64,
    pub effective_usec: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFailure {
    pub entry: usize,
    pub rank: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub result: SimResult,
    pub fired: Vec<FiredEntry>,
    #[serde(skip)]
    pub conflicts: Vec<(usize, SimError)>,
    pub failures: Vec<PlanFailure>,
}

impl PlanOutcome {
    /// The result, or the first resize conflict if any target failed.
    pub fn strict(self) -> Result<SimResult, ScalingError> {
        match self.conflicts.into_iter().next() {
            Some((_, err)) => Err(ScalingError::Sim(err)),
            None => Ok(self.result),
        }
    }
}

/// Replays `plan` against `scenario`. Each entry fires when its trigger is
/// seen through an up-to-date iteration counter; the cgroup change lands
/// `sync_delay_usec` later.
pub fn apply_plan_in_sim(
    plan: &PatchPlan,
    scenario: &SimScenario,
    sync_delay_usec: u64,
) -> Result<PlanOutcome, ScalingError> {
    apply_plan_with_signal(plan, scenario, sync_delay_usec, &ProgressSignal::default())
}

/// [`apply_plan_in_sim`] with a possibly stale progress signal. Triggers
/// whose detection falls after the end of the run never fire.
pub fn apply_plan_with_signal(
    plan: &PatchPlan,
    scenario: &SimScenario,
    sync_delay_usec: u64,
    signal: &ProgressSignal,
) -> Result<PlanOutcome, ScalingError> {
    plan.validate()?;
    for (i, e) in plan.entries.iter().enumerate() {
        if let Some(&r) = e.targets.iter().find(|&&r| r >= scenario.ranks.len()) {
            return Err(ScalingError::InvalidPlan(format!(
                "entry {i} targets missing rank {r}"
            )));
        }
        if let Trigger::AtIteration(n) = e.trigger {
            if n > scenario.iterations {
                return Err(ScalingError::InvalidPlan(format!(
                    "entry {i} fires after the last iteration"
                )));
            }
        }
    }

    let mut sim = Simulator::with_schedule(scenario)?;
    let total = sim.iterations_total() as f64;
    let mut trace = ProgressTrace::new();
    trace.record(0, 0.0);
    let mut last_iter = 0;

    let mut fired = Vec::new();
    let mut conflicts = Vec::new();
    let mut failures = Vec::new();
    let mut next = 0usize;
    let mut detect_at: Option<u64> = None;

    loop {
        let now = sim.now();
        if sim.iterations_completed() != last_iter {
            last_iter = sim.iterations_completed();
            trace.record(now, last_iter as f64 / total);
        }
        while next < plan.entries.len() && !sim.is_finished() {
            let entry = &plan.entries[next];
            if detect_at.is_none() {
                detect_at = match entry.trigger {
                    Trigger::AtTime(t) => Some(t),
                    Trigger::AtIteration(n) => {
                        detection_time(signal, &trace, n as f64 / total).filter(|_| last_iter >= n)
                    }
                    Trigger::AtProgressFraction(f) => detection_time(signal, &trace, f),
                };
            }
            match detect_at {
                Some(at) if at <= now => {
                    let effective = now + sync_delay_usec;
                    for (k, &rank) in entry.targets.iter().enumerate() {
                        let resize = Resize {
                            request_millicores: entry.new_requests_millicores[k],
                            limit_millicores: entry.new_limits_millicores.as_ref().map(|l| l[k]),
                        };
                        if let Err(err) = sim.apply_resize(rank, resize, effective) {
                            match err {
                                SimError::ResizeConflict { .. }
                                | SimError::InvalidResize { .. } => {
                                    failures.push(PlanFailure {
                                        entry: next,
                                        rank,
                                        error: err.to_string(),
                                    });
                                    conflicts.push((next, err));
                                }
                                other => return Err(other.into()),
                            }
                        }
                    }
                    fired.push(FiredEntry {
                        entry: next,
                        detected_at_usec: now,
                        effective_usec: effective,
                    });
                    next += 1;
                    detect_at = None;
                }
                _ => break,
            }
        }
        if sim.is_finished() {
            break;
        }
        sim.step_toward(detect_at)?;
    }

    Ok(PlanOutcome {
        result: sim.into_result(),
        fired,
        conflicts,
        failures,
    })
}

/// Shell rendering of the plan as `kubectl patch ... --subresource resize`
/// calls, one per target, grouped under a comment naming the trigger. Not
/// executed by this crate.
pub fn render_shell(plan: &PatchPlan, pod_names: &[String]) -> String {
    let mut out = String::from(
        "#!/bin/sh\n# In-place CPU resize plan; each block runs when its trigger fires.\nset -e\n",
    );
    for (i, e) in plan.entries.iter().enumerate() {
        let _ = writeln!(out, "\n# entry {i}: {}", e.trigger);
        for (k, &rank) in e.targets.iter().enumerate() {
            let name = pod_names
                .get(rank)
                .cloned()
                .unwrap_or_else(|| format!("rank-{rank}"));
            let mut ops = vec![format!(
                r#"{{"op":"replace","path":"/spec/containers/0/resources/requests/cpu","value":"{}m"}}"#,
                e.new_requests_millicores[k]
            )];
            if let Some(limits) = &e.new_limits_millicores {
                ops.push(format!(
                    r#"{{"op":"replace","path":"/spec/containers/0/resources/limits/cpu","value":"{}m"}}"#,
                    limits[k]
                ));
            }
            let _ = writeln!(
                out,
                "kubectl patch pod {name} --subresource resize --type=json -p '[{}]'",
                ops.join(",")
            );
        }
    }
    out
}
