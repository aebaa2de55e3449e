//! Compact JSON scenario descriptions and the bundled example set.
//!
//! A [`ScenarioFile`] names the decomposition (explicit cells, or weights
//! plus a mesh size), the CPU allocation (explicit requests, or a budget
//! split by weight) and the run parameters. [`ScenarioFile::resolve`]
//! expands it into a [`SimScenario`] plus an optional resize plan.

use serde::{Deserialize, Serialize};

use crate::alloc::{
    allocate_cpu, apportion_cells, AllocError, AllocationMode, AllocationPlan, WeightVector,
};
use crate::rational::Rational;
use crate::scaling::{
    apply_plan_with_signal, PatchPlan, PhaseSchedule, PlanOutcome, ProgressSignal, ScalingError,
    DEFAULT_SYNC_DELAY_USEC,
};
use crate::sim::{
    simulate, BarrierWait, NodeSpec, RankProfile, SimError, SimResult, SimScenario,
    DEFAULT_COMM_ROUNDS, DEFAULT_SAMPLE_INTERVAL_USEC,
};
use crate::{DEFAULT_PERIOD_USEC, SINGLE_THREAD_MILLICORES};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("malformed scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error("no bundled scenario named `{0}`")]
    UnknownBundled(String),
    #[error("cannot read {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeFile {
    pub capacity_millicores: u64,
    #[serde(default)]
    pub background_load_millicores: u64,
    /// Ranks placed on this node.
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,

    /// Cells per rank. Alternative to `weights` + `total_cells`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<u64>>,
    /// Decomposition weights; also split the CPU budget unless
    /// `cpu_weights` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_cells: Option<u64>,
    pub cost_per_cell_usec: Rational,

    pub mode: AllocationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_millicores: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits_millicores: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_millicores: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_weights: Option<WeightVector>,

    /// Defaults to one node with a full core per rank.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<NodeFile>,
    pub iterations: u64,
    #[serde(default = "default_rounds")]
    pub comm_rounds_per_iter: u32,
    #[serde(default)]
    pub barrier_latency_usec: u64,
    #[serde(default)]
    pub barrier_wait: BarrierWait,
    #[serde(default = "default_period")]
    pub period_usec: u64,
    #[serde(default = "default_sample_interval")]
    pub sample_interval_usec: u64,
    #[serde(default = "default_demand")]
    pub demand_millicores: u64,
    #[serde(default)]
    pub record_rounds: bool,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_schedule: Option<PhaseSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_plan: Option<PatchPlan>,
    #[serde(default = "default_sync_delay")]
    pub sync_delay_usec: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress_signal: Option<ProgressSignal>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pod_names: Vec<String>,
}

fn default_rounds() -> u32 {
    DEFAULT_COMM_ROUNDS
}
fn default_period() -> u64 {
    DEFAULT_PERIOD_USEC
}
fn default_sample_interval() -> u64 {
    DEFAULT_SAMPLE_INTERVAL_USEC
}
fn default_demand() -> u64 {
    SINGLE_THREAD_MILLICORES
}
fn default_sync_delay() -> u64 {
    DEFAULT_SYNC_DELAY_USEC
}

impl Default for ScenarioFile {
    fn default() -> Self {
        ScenarioFile {
            name: String::new(),
            description: String::new(),
            cells: None,
            weights: None,
            total_cells: None,
            cost_per_cell_usec: Rational::integer(1),
            mode: AllocationMode::RequestsOnly,
            requests_millicores: None,
            limits_millicores: None,
            budget_millicores: None,
            cpu_weights: None,
            nodes: Vec::new(),
            iterations: 1,
            comm_rounds_per_iter: DEFAULT_COMM_ROUNDS,
            barrier_latency_usec: 0,
            barrier_wait: BarrierWait::Block,
            period_usec: DEFAULT_PERIOD_USEC,
            sample_interval_usec: DEFAULT_SAMPLE_INTERVAL_USEC,
            demand_millicores: SINGLE_THREAD_MILLICORES,
            record_rounds: false,
            phase_schedule: None,
            patch_plan: None,
            sync_delay_usec: DEFAULT_SYNC_DELAY_USEC,
            progress_signal: None,
            pod_names: Vec::new(),
        }
    }
}

/// A scenario ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedScenario {
    pub name: String,
    pub cells: Vec<u64>,
    pub plan: AllocationPlan,
    pub scenario: SimScenario,
    pub patch_plan: Option<PatchPlan>,
    pub sync_delay_usec: u64,
    pub progress_signal: ProgressSignal,
    pub pod_names: Vec<String>,
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario files always serialise")
    }

    fn resolve_cells(&self) -> Result<Vec<u64>, ScenarioError> {
        match (&self.cells, &self.weights, self.total_cells) {
            (Some(cells), _, None) => Ok(cells.clone()),
            (None, Some(w), Some(total)) => Ok(apportion_cells(w, total)?.cells_per_rank),
            (Some(_), _, Some(_)) => Err(ScenarioError::Invalid(
                "give either `cells` or `total_cells`, not both".into(),
            )),
            _ => Err(ScenarioError::Invalid(
                "decomposition needs `cells` or `weights` with `total_cells`".into(),
            )),
        }
    }

    fn resolve_plan(&self, cells: &[u64]) -> Result<AllocationPlan, ScenarioError> {
        match (&self.requests_millicores, self.budget_millicores) {
            (Some(requests), None) => {
                let plan = AllocationPlan::from_requests(
                    requests.clone(),
                    self.limits_millicores.clone(),
                    self.mode,
                )?;
                Ok(plan)
            }
            (None, Some(budget)) => {
                let weights = match (&self.cpu_weights, &self.weights) {
                    (Some(w), _) | (None, Some(w)) => w.clone(),
                    (None, None) => WeightVector::from_integers(cells)?,
                };
                let mut plan = allocate_cpu(&weights, budget, self.mode)?;
                if let Some(limits) = &self.limits_millicores {
                    plan.limits_millicores = Some(limits.clone());
                    plan.validate()?;
                }
                Ok(plan)
            }
            (Some(_), Some(_)) => Err(ScenarioError::Invalid(
                "give either `requests_millicores` or `budget_millicores`, not both".into(),
            )),
            (None, None) => Err(ScenarioError::Invalid(
                "allocation needs `requests_millicores` or `budget_millicores`".into(),
            )),
        }
    }

    pub fn resolve(&self) -> Result<ResolvedScenario, ScenarioError> {
        let cells = self.resolve_cells()?;
        let plan = self.resolve_plan(&cells)?;
        if plan.len() != cells.len() {
            return Err(ScenarioError::Invalid(format!(
                "{} ranks in the decomposition but {} in the allocation",
                cells.len(),
                plan.len()
            )));
        }
        let params = plan.cgroup_params(self.period_usec)?;

        let nodes_file = if self.nodes.is_empty() {
            vec![NodeFile {
                capacity_millicores: SINGLE_THREAD_MILLICORES * cells.len() as u64,
                background_load_millicores: 0,
                ranks: (0..cells.len()).collect(),
            }]
        } else {
            self.nodes.clone()
        };
        let mut node_of = vec![None; cells.len()];
        for (n, node) in nodes_file.iter().enumerate() {
            for &r in &node.ranks {
                match node_of.get_mut(r) {
                    Some(slot @ None) => *slot = Some(n),
                    Some(Some(_)) => {
                        return Err(ScenarioError::Invalid(format!("rank {r} is placed twice")))
                    }
                    None => {
                        return Err(ScenarioError::Invalid(format!(
                            "node {n} places missing rank {r}"
                        )))
                    }
                }
            }
        }
        let ranks = cells
            .iter()
            .zip(&params)
            .enumerate()
            .map(|(i, (&c, &cgroup))| {
                let node_id = node_of[i].ok_or_else(|| {
                    ScenarioError::Invalid(format!("rank {i} is not placed on a node"))
                })?;
                Ok(RankProfile {
                    cells: c,
                    cost_per_cell_usec: self.cost_per_cell_usec,
                    comm_rounds_per_iter: self.comm_rounds_per_iter,
                    node_id,
                    cgroup,
                    demand_millicores: self.demand_millicores,
                })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        let nodes = nodes_file
            .iter()
            .map(|n| NodeSpec {
                capacity_millicores: n.capacity_millicores,
                resident_rank_ids: n.ranks.clone(),
                background_load_millicores: n.background_load_millicores,
            })
            .collect();

        let scenario = SimScenario {
            ranks,
            nodes,
            iterations: self.iterations,
            mode: self.mode,
            phase_schedule: self.phase_schedule.clone(),
            barrier_latency_usec: self.barrier_latency_usec,
            sample_interval_usec: self.sample_interval_usec,
            barrier_wait: self.barrier_wait,
            record_rounds: self.record_rounds,
        };
        scenario.validate()?;
        if let Some(p) = &self.patch_plan {
            p.validate()?;
        }
        let pod_names = if self.pod_names.is_empty() {
            (0..cells.len()).map(|i| format!("rank-{i}")).collect()
        } else if self.pod_names.len() == cells.len() {
            self.pod_names.clone()
        } else {
            return Err(ScenarioError::Invalid(
                "pod_names must name every rank".into(),
            ));
        };
        Ok(ResolvedScenario {
            name: self.name.clone(),
            cells,
            plan,
            scenario,
            patch_plan: self.patch_plan.clone(),
            sync_delay_usec: self.sync_delay_usec,
            progress_signal: self.progress_signal.unwrap_or_default(),
            pod_names,
        })
    }
}

impl ResolvedScenario {
    /// Runs the scenario, replaying its resize plan if it has one.
    pub fn run(&self) -> Result<SimResult, ScenarioError> {
        Ok(self.run_with_plan()?.result)
    }

    /// Like [`run`](Self::run) but keeps which patches fired and which
    /// targets were refused.
    pub fn run_with_plan(&self) -> Result<PlanOutcome, ScenarioError> {
        match &self.patch_plan {
            Some(plan) => Ok(apply_plan_with_signal(
                plan,
                &self.scenario,
                self.sync_delay_usec,
                &self.progress_signal,
            )?),
            None => Ok(PlanOutcome {
                result: simulate(&self.scenario)?,
                fired: Vec::new(),
                conflicts: Vec::new(),
                failures: Vec::new(),
            }),
        }
    }
}

/// Names of the scenarios shipped with the crate.
pub const BUNDLED: [&str; 5] = [
    "c2_equal",
    "c3_hard_limits",
    "c4_requests_only",
    "c5_dynamic",
    "sixteen_rank_grouped",
];

/// Source text of a bundled scenario.
pub fn bundled_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "c2_equal" => include_str!("../scenarios/c2_equal.json"),
        "c3_hard_limits" => include_str!("../scenarios/c3_hard_limits.json"),
        "c4_requests_only" => include_str!("../scenarios/c4_requests_only.json"),
        "c5_dynamic" => include_str!("../scenarios/c5_dynamic.json"),
        "sixteen_rank_grouped" => include_str!("../scenarios/sixteen_rank_grouped.json"),
        _ => return None,
    })
}

pub fn bundled(name: &str) -> Result<ScenarioFile, ScenarioError> {
    let text =
        bundled_source(name).ok_or_else(|| ScenarioError::UnknownBundled(name.to_string()))?;
    ScenarioFile::from_json(text)
}

/// Loads a bundled scenario by name, or a scenario file by path.
pub fn load(name_or_path: &str) -> Result<ScenarioFile, ScenarioError> {
    if let Some(text) = bundled_source(name_or_path) {
        return ScenarioFile::from_json(text);
    }
    let text = std::fs::read_to_string(name_or_path).map_err(|source| ScenarioError::Io {
        path: name_or_path.to_string(),
        source,
    })?;
    ScenarioFile::from_json(&text)
}
