use crate::alloc::{quota_for_limit, AllocationMode, CgroupParams, Quota};
use crate::SINGLE_THREAD_MILLICORES;

use super::fair::{weighted_max_min, ShareClaim};
use super::{
    BarrierWait, NodeSummary, RankResult, ResizeEvent, RoundRecord, SimError, SimResult,
    SimScenario, UsageSample,
};

/// A new request (and, under hard limits, optionally a new limit).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resize {
    pub request_millicores: u64,
    pub limit_millicores: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThrottleCounters {
    pub nr_throttled: u64,
    pub throttled_usec: u64,
}

/// Where a rank is inside the iteration structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankProgress {
    pub iteration: u64,
    pub round: u32,
    /// Work done on the current chunk, milli-core-microseconds.
    pub chunk_done: u64,
    pub chunk_total: u64,
    pub work_done: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activity {
    Computing { remaining: u64 },
    Waiting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Barrier {
    Gathering,
    Releasing { at: u64 },
}

#[derive(Debug, Clone)]
struct PendingResize {
    apply_at: u64,
    cgroup: CgroupParams,
    request: u64,
    limit: Option<u64>,
    log_index: usize,
}

#[derive(Debug, Clone)]
struct RankState {
    node: usize,
    cgroup: CgroupParams,
    request: u64,
    limit: Option<u64>,
    initial_request: u64,
    initial_limit: Option<u64>,
    demand: u64,
    chunks: Vec<u64>,
    activity: Activity,
    /// Quota left in this period, milli-core-microseconds.
    quota_left: u64,
    next_boundary: u64,
    throttled_since: Option<u64>,
    nr_throttled: u64,
    throttled_usec: u64,
    consumed: u64,
    work_done: u64,
    arrival: u64,
    pending: Vec<PendingResize>,
    series: Vec<UsageSample>,
    sampled_units: u64,
    consumed_at_last_sample: u64,
}

impl RankState {
    fn quota_budget(&self) -> Option<u64> {
        self.cgroup.quota_usec.bounded().map(|q| q * 1000)
    }

    fn current_chunk(&self, round: u32) -> u64 {
        self.chunks[round as usize]
    }
}

/// Event-driven CFS simulator. Build it from a scenario, optionally
/// schedule resizes, then step or run it to completion.
#[derive(Debug, Clone)]
pub struct Simulator {
    ranks: Vec<RankState>,
    nodes: Vec<NodeSummary>,
    available: Vec<u64>,
    mode: AllocationMode,
    wait: BarrierWait,
    rounds_per_iter: u32,
    iterations: u64,
    latency: u64,
    sample_interval: u64,
    now: u64,
    iteration: u64,
    round: u32,
    iteration_start: u64,
    round_start: u64,
    barrier: Barrier,
    per_iteration_wall: Vec<u64>,
    next_sample: u64,
    last_sample_time: u64,
    finished: bool,
    rates: Vec<u64>,
    resizes: Vec<ResizeEvent>,
    record_rounds: bool,
    rounds: Vec<RoundRecord>,
}

impl Simulator {
    pub fn new(scenario: &SimScenario) -> Result<Self, SimError> {
        let scenario = scenario.clone().with_derived_residency();
        scenario.validate()?;
        let k = scenario.comm_rounds();
        let ranks: Vec<RankState> = scenario
            .ranks
            .iter()
            .map(|r| {
                let per_iter = r.work_per_iteration();
                let base = per_iter / k as u64;
                let extra = (per_iter % k as u64) as usize;
                let chunks: Vec<u64> = (0..k as usize)
                    .map(|i| base + u64::from(i < extra))
                    .collect();
                let limit = r.cgroup.limit_millicores();
                let mut state = RankState {
                    node: r.node_id,
                    cgroup: r.cgroup,
                    request: r.request_millicores(),
                    limit,
                    initial_request: r.request_millicores(),
                    initial_limit: limit,
                    demand: r.demand_millicores,
                    activity: Activity::Computing {
                        remaining: chunks[0],
                    },
                    chunks,
                    quota_left: 0,
                    next_boundary: r.cgroup.period_usec,
                    throttled_since: None,
                    nr_throttled: 0,
                    throttled_usec: 0,
                    consumed: 0,
                    work_done: 0,
                    arrival: 0,
                    pending: Vec::new(),
                    series: Vec::new(),
                    sampled_units: 0,
                    consumed_at_last_sample: 0,
                };
                state.quota_left = state.quota_budget().unwrap_or(0);
                state
            })
            .collect();
        let nodes: Vec<NodeSummary> = scenario
            .nodes
            .iter()
            .map(|n| NodeSummary {
                capacity_millicores: n.capacity_millicores,
                background_load_millicores: n.background_load_millicores,
                resident_rank_ids: n.resident_rank_ids.clone(),
            })
            .collect();
        let available = scenario
            .nodes
            .iter()
            .map(|n| n.available_millicores())
            .collect();
        let n = ranks.len();
        let mut sim = Simulator {
            ranks,
            nodes,
            available,
            mode: scenario.mode,
            wait: scenario.barrier_wait,
            rounds_per_iter: k,
            iterations: scenario.iterations,
            latency: scenario.barrier_latency_usec,
            sample_interval: scenario.sample_interval_usec,
            now: 0,
            iteration: 0,
            round: 0,
            iteration_start: 0,
            round_start: 0,
            barrier: Barrier::Gathering,
            per_iteration_wall: Vec::with_capacity(scenario.iterations as usize),
            next_sample: scenario.sample_interval_usec,
            last_sample_time: 0,
            finished: false,
            rates: vec![0; n],
            resizes: Vec::new(),
            record_rounds: scenario.record_rounds,
            rounds: Vec::new(),
        };
        // Zero-work chunks arrive immediately.
        sim.settle();
        sim.compute_rates();
        for i in 0..n {
            let rate = sim.rates[i];
            sim.ranks[i].series.push(UsageSample {
                time_usec: 0,
                millicores: rate,
            });
        }
        Ok(sim)
    }

    /// Builds a simulator with the scenario's phase schedule, if any,
    /// queued as resizes at its transition times.
    pub fn with_schedule(scenario: &SimScenario) -> Result<Self, SimError> {
        let mut sim = Simulator::new(scenario)?;
        if let Some(schedule) = &scenario.phase_schedule {
            for (at, plan) in schedule.transitions() {
                for rank in 0..scenario.ranks.len() {
                    let resize = Resize {
                        request_millicores: plan.requests_millicores[rank],
                        limit_millicores: plan.limit(rank),
                    };
                    sim.apply_resize(rank, resize, at)?;
                }
            }
        }
        Ok(sim)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn iterations_completed(&self) -> u64 {
        self.iteration
    }

    pub fn iterations_total(&self) -> u64 {
        self.iterations
    }

    pub fn counters(&self, rank: usize) -> ThrottleCounters {
        let r = &self.ranks[rank];
        let open = r.throttled_since.map_or(0, |s| self.now - s);
        ThrottleCounters {
            nr_throttled: r.nr_throttled,
            throttled_usec: r.throttled_usec + open,
        }
    }

    pub fn cgroup(&self, rank: usize) -> CgroupParams {
        self.ranks[rank].cgroup
    }

    pub fn progress(&self, rank: usize) -> RankProgress {
        let r = &self.ranks[rank];
        let chunk_total = if self.finished {
            0
        } else {
            r.current_chunk(self.round)
        };
        let chunk_done = match r.activity {
            Activity::Computing { remaining } => chunk_total - remaining,
            Activity::Waiting => chunk_total,
        };
        RankProgress {
            iteration: self.iteration,
            round: self.round,
            chunk_done,
            chunk_total,
            work_done: r.work_done,
        }
    }

    /// Schedules a cgroup update for `rank`. It takes effect at the first
    /// period boundary at or after `effective_time_usec`; the rank's
    /// iteration, chunk progress and barrier state are untouched.
    pub fn apply_resize(
        &mut self,
        rank: usize,
        resize: Resize,
        effective_time_usec: u64,
    ) -> Result<(), SimError> {
        if rank >= self.ranks.len() {
            return Err(SimError::InvalidResize {
                rank,
                reason: "no such rank".into(),
            });
        }
        if resize.request_millicores == 0 {
            return Err(SimError::InvalidResize {
                rank,
                reason: "request must be positive".into(),
            });
        }
        let state = &self.ranks[rank];
        let period = state.cgroup.period_usec;
        let (cgroup, limit) = match self.mode {
            AllocationMode::HardLimits => {
                let limit = resize
                    .limit_millicores
                    .or(state.limit)
                    .unwrap_or(resize.request_millicores);
                if resize.request_millicores > limit {
                    let err = SimError::ResizeConflict {
                        rank,
                        request_millicores: resize.request_millicores,
                        limit_millicores: limit,
                    };
                    self.resizes.push(ResizeEvent {
                        rank,
                        requested_at_usec: self.now,
                        effective_usec: effective_time_usec,
                        applied_at_usec: None,
                        request_millicores: resize.request_millicores,
                        limit_millicores: resize.limit_millicores,
                        failure: Some(err.to_string()),
                    });
                    return Err(err);
                }
                let mut cg = quota_for_limit(limit, period)?;
                cg.cpu_weight = resize.request_millicores;
                (cg, Some(limit))
            }
            AllocationMode::RequestsOnly => {
                if resize.limit_millicores.is_some() {
                    return Err(SimError::InvalidResize {
                        rank,
                        reason: "limits cannot be set in requests-only mode".into(),
                    });
                }
                (
                    CgroupParams {
                        quota_usec: Quota::Unlimited,
                        period_usec: period,
                        cpu_weight: resize.request_millicores,
                    },
                    None,
                )
            }
        };
        let effective = effective_time_usec.max(self.now);
        let apply_at = effective.div_ceil(period) * period;
        let log_index = self.resizes.len();
        self.resizes.push(ResizeEvent {
            rank,
            requested_at_usec: self.now,
            effective_usec: effective_time_usec,
            applied_at_usec: None,
            request_millicores: resize.request_millicores,
            limit_millicores: limit,
            failure: None,
        });
        let pending = PendingResize {
            apply_at,
            cgroup,
            request: resize.request_millicores,
            limit,
            log_index,
        };
        if apply_at == self.now && self.now.is_multiple_of(period) {
            // This boundary has already been processed: apply as if the
            // resize had come first and refill with the new quota.
            self.install(rank, pending);
            let r = &mut self.ranks[rank];
            if let Some(budget) = r.quota_budget() {
                r.quota_left = budget;
                if let Some(since) = r.throttled_since.take() {
                    r.throttled_usec += self.now - since;
                }
            }
            self.compute_rates();
        } else {
            let pos = self.ranks[rank]
                .pending
                .partition_point(|p| p.apply_at <= apply_at);
            self.ranks[rank].pending.insert(pos, pending);
        }
        Ok(())
    }

    fn install(&mut self, rank: usize, p: PendingResize) {
        let r = &mut self.ranks[rank];
        r.cgroup = p.cgroup;
        r.request = p.request;
        r.limit = p.limit;
        self.resizes[p.log_index].applied_at_usec = Some(self.now);
    }

    fn wants_cpu(&self, i: usize) -> bool {
        if self.finished {
            return false;
        }
        match self.ranks[i].activity {
            Activity::Computing { .. } => true,
            Activity::Waiting => self.wait == BarrierWait::Spin,
        }
    }

    fn compute_rates(&mut self) {
        let mut claims: Vec<Vec<ShareClaim>> = vec![Vec::new(); self.nodes.len()];
        for i in 0..self.ranks.len() {
            self.rates[i] = 0;
            let r = &self.ranks[i];
            if self.wants_cpu(i) && r.throttled_since.is_none() {
                claims[r.node].push(ShareClaim {
                    rank: i,
                    weight: r.cgroup.cpu_weight,
                    cap_millicores: r.demand.min(SINGLE_THREAD_MILLICORES),
                });
            }
        }
        for (node, node_claims) in claims.iter().enumerate() {
            if node_claims.is_empty() {
                continue;
            }
            let shares = weighted_max_min(self.available[node], node_claims);
            for (c, s) in node_claims.iter().zip(shares) {
                self.rates[c.rank] = s;
            }
        }
    }

    fn next_event(&self, horizon: Option<u64>) -> Option<u64> {
        let mut best: Option<u64> = None;
        let mut offer = |t: u64| {
            if t > self.now {
                best = Some(best.map_or(t, |b: u64| b.min(t)));
            }
        };
        if let Some(h) = horizon {
            offer(h);
        }
        offer(self.next_sample);
        if let Barrier::Releasing { at } = self.barrier {
            offer(at);
        }
        for (i, r) in self.ranks.iter().enumerate() {
            let rate = self.rates[i];
            if let Some(p) = r.pending.first() {
                offer(p.apply_at);
            }
            if r.cgroup.quota_usec.bounded().is_some() {
                offer(r.next_boundary);
                if rate > 0 {
                    offer(self.now + r.quota_left.div_ceil(rate).max(1));
                }
            }
            if let Activity::Computing { remaining } = r.activity {
                if rate > 0 {
                    offer(self.now + remaining.div_ceil(rate).max(1));
                }
            }
        }
        best
    }

    fn advance(&mut self, dt: u64) {
        for i in 0..self.ranks.len() {
            let rate = self.rates[i];
            if rate == 0 {
                continue;
            }
            let r = &mut self.ranks[i];
            let mut used = rate * dt;
            let bounded = r.cgroup.quota_usec.bounded().is_some();
            if bounded {
                used = used.min(r.quota_left);
            }
            if let Activity::Computing { remaining } = &mut r.activity {
                used = used.min(*remaining);
                *remaining -= used;
                r.work_done += used;
            }
            if bounded {
                r.quota_left -= used;
            }
            r.consumed += used;
        }
        self.now += dt;
    }

    /// Processes everything that happens at `self.now`, in a fixed order:
    /// resizes, period boundaries, chunk completions, barriers, throttling,
    /// sampling.
    fn process_instant(&mut self) {
        let now = self.now;
        for i in 0..self.ranks.len() {
            while self.ranks[i]
                .pending
                .first()
                .is_some_and(|p| p.apply_at == now)
            {
                let p = self.ranks[i].pending.remove(0);
                self.install(i, p);
            }
        }
        for r in &mut self.ranks {
            if r.cgroup.quota_usec.bounded().is_none() {
                continue;
            }
            // Boundaries move with the period; catch up if a resize turned
            // an unlimited rank into a bounded one.
            if r.next_boundary < now {
                r.next_boundary = now.div_ceil(r.cgroup.period_usec) * r.cgroup.period_usec;
                if r.next_boundary == now {
                    r.next_boundary += r.cgroup.period_usec;
                }
            }
            if r.next_boundary == now {
                if let Some(since) = r.throttled_since.take() {
                    r.throttled_usec += now - since;
                }
                r.quota_left = r.quota_budget().unwrap_or(0);
                r.next_boundary += r.cgroup.period_usec;
            }
        }
        self.settle();
        if !self.finished {
            for i in 0..self.ranks.len() {
                let wants = self.wants_cpu(i);
                let r = &mut self.ranks[i];
                if wants
                    && r.throttled_since.is_none()
                    && r.cgroup.quota_usec.bounded().is_some()
                    && r.quota_left == 0
                {
                    r.throttled_since = Some(now);
                    r.nr_throttled += 1;
                }
            }
        }
        if now == self.next_sample {
            self.take_samples();
            self.next_sample += self.sample_interval;
        }
    }

    /// Chunk completions and barrier transitions at the current instant.
    fn settle(&mut self) {
        let now = self.now;
        loop {
            for r in &mut self.ranks {
                if r.activity == (Activity::Computing { remaining: 0 }) {
                    r.activity = Activity::Waiting;
                    r.arrival = now;
                }
            }
            match self.barrier {
                Barrier::Gathering => {
                    if !self.ranks.iter().all(|r| r.activity == Activity::Waiting) {
                        return;
                    }
                    if self.latency > 0 {
                        self.barrier = Barrier::Releasing {
                            at: now + self.latency,
                        };
                        return;
                    }
                }
                Barrier::Releasing { at } => {
                    if at != now {
                        return;
                    }
                }
            }
            self.release();
            if self.finished {
                return;
            }
        }
    }

    fn release(&mut self) {
        let now = self.now;
        if self.record_rounds {
            self.rounds.push(RoundRecord {
                iteration: self.iteration,
                round: self.round,
                start_usec: self.round_start,
                completion_usec: self.ranks.iter().map(|r| r.arrival).collect(),
                released_usec: now,
            });
        }
        self.barrier = Barrier::Gathering;
        self.round += 1;
        if self.round == self.rounds_per_iter {
            self.round = 0;
            self.per_iteration_wall.push(now - self.iteration_start);
            self.iteration += 1;
            self.iteration_start = now;
            if self.iteration == self.iterations {
                self.finish();
                return;
            }
        }
        self.round_start = now;
        let round = self.round;
        for r in &mut self.ranks {
            r.activity = Activity::Computing {
                remaining: r.current_chunk(round),
            };
        }
    }

    fn finish(&mut self) {
        self.finished = true;
        let now = self.now;
        for r in &mut self.ranks {
            if let Some(since) = r.throttled_since.take() {
                r.throttled_usec += now - since;
            }
        }
        if now > self.last_sample_time {
            let window = now - self.last_sample_time;
            for r in &mut self.ranks {
                let used = r.consumed - r.consumed_at_last_sample;
                r.series.push(UsageSample {
                    time_usec: now,
                    millicores: (used + window / 2) / window,
                });
            }
            self.last_sample_time = now;
        }
        self.rates.iter_mut().for_each(|x| *x = 0);
    }

    /// Window averages with the rounding error carried forward, so the
    /// series integrates to within one milli-core-window of the truth.
    fn take_samples(&mut self) {
        let now = self.now;
        let dt = self.sample_interval;
        for r in &mut self.ranks {
            let units = r.consumed / dt;
            r.series.push(UsageSample {
                time_usec: now,
                millicores: units - r.sampled_units,
            });
            r.sampled_units = units;
            r.consumed_at_last_sample = r.consumed;
        }
        self.last_sample_time = now;
    }

    /// Advances to the next event. Returns `false` once the run is over.
    pub fn step(&mut self) -> Result<bool, SimError> {
        self.step_bounded(None)
    }

    fn step_bounded(&mut self, horizon: Option<u64>) -> Result<bool, SimError> {
        if self.finished {
            return Ok(false);
        }
        self.compute_rates();
        let Some(t) = self.next_event(horizon) else {
            let node = self.ranks.iter().map(|r| r.node).next().unwrap_or(0);
            return Err(SimError::UnschedulableScenario { node });
        };
        self.advance(t - self.now);
        self.process_instant();
        Ok(!self.finished)
    }

    /// Advances to the next event, stopping early at `horizon` if given.
    pub fn step_toward(&mut self, horizon: Option<u64>) -> Result<bool, SimError> {
        match horizon {
            Some(h) if h <= self.now => Ok(!self.finished),
            _ => self.step_bounded(horizon),
        }
    }

    /// Runs until virtual time reaches `t` or the run finishes.
    pub fn run_until(&mut self, t: u64) -> Result<(), SimError> {
        while !self.finished && self.now < t {
            self.step_bounded(Some(t))?;
        }
        Ok(())
    }

    pub fn run_to_completion(mut self) -> Result<SimResult, SimError> {
        while self.step()? {}
        Ok(self.into_result())
    }

    /// Snapshot of the run so far (complete once finished).
    pub fn into_result(self) -> SimResult {
        let now = self.now;
        SimResult {
            mode: self.mode,
            wall_clock_usec: now,
            iterations_completed: self.iteration,
            comm_rounds_per_iter: self.rounds_per_iter,
            barrier_latency_usec: self.latency,
            per_rank: self
                .ranks
                .into_iter()
                .map(|r| RankResult {
                    nr_throttled: r.nr_throttled,
                    throttled_usec: r.throttled_usec + r.throttled_since.map_or(0, |s| now - s),
                    request_millicores: r.initial_request,
                    limit_millicores: r.initial_limit,
                    work_millicore_usec: r.work_done,
                    consumed_millicore_usec: r.consumed,
                    cpu_usage_series: r.series,
                })
                .collect(),
            per_iteration_wall_usec: self.per_iteration_wall,
            nodes: self.nodes,
            resizes: self.resizes,
            rounds: self.rounds,
        }
    }
}
