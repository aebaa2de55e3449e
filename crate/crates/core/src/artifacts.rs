//! File formats at the edges of the workflow: pod manifests carrying the
//! allocation, `processorWeights` fragments for the decomposition
//! dictionary, and per-subdomain cell-count reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_integer::Integer;
use serde::{Deserialize, Serialize};

use crate::alloc::{fraction_list, AllocError, AllocationMode, AllocationPlan, WeightVector};
use crate::rational::Rational;

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("{names} pod names for {ranks} ranks")]
    NameCountMismatch { names: usize, ranks: usize },
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("malformed milli-core quantity `{0}`")]
    MalformedMillicores(String),
    #[error("malformed weight list: {0}")]
    MalformedWeights(String),
    #[error("malformed decomposition report at line {line}: {reason}")]
    MalformedReport { line: usize, reason: String },
    #[error("decomposition report has no entry for rank {rank}")]
    RankGap { rank: usize },
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

const MODE_KEY: &str = "rankshare.io/mode";
const BUDGET_KEY: &str = "rankshare.io/budget-millicores";
const FRACTION_KEY: &str = "rankshare.io/fraction";
const RANK_LABEL: &str = "rankshare.io/rank";

/// `n` milli-cores as a Kubernetes quantity.
pub fn format_millicores(n: u64) -> String {
    format!("{n}m")
}

/// Parses `"250m"`, `"2"` or `"0.25"` into milli-cores. Fractional cores
/// must be whole milli-cores.
pub fn parse_millicores(s: &str) -> Result<u64, ArtifactError> {
    let bad = || ArtifactError::MalformedMillicores(s.to_string());
    let t = s.trim();
    if let Some(m) = t.strip_suffix('m') {
        if m.is_empty() || !m.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        return m.parse().map_err(|_| bad());
    }
    let (whole, frac) = t.split_once('.').unwrap_or((t, ""));
    if whole.is_empty()
        || !whole.bytes().all(|b| b.is_ascii_digit())
        || frac.len() > 3
        || !frac.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(bad());
    }
    let cores: u64 = whole.parse().map_err(|_| bad())?;
    let milli: u64 = format!("{frac:0<3}").parse().map_err(|_| bad())?;
    cores
        .checked_mul(1000)
        .and_then(|c| c.checked_add(milli))
        .ok_or_else(bad)
}

/// One rank's pod, reduced to the fields the allocation touches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PodManifestModel {
    pub pod_name: String,
    pub rank_id: usize,
    pub requests_cpu: String,
    pub limits_cpu: Option<String>,
    /// `(resource, restart policy)` pairs.
    pub resize_policy: Vec<(String, String)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct PodDoc {
    api_version: String,
    kind: String,
    metadata: Metadata,
    spec: PodSpec,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    name: String,
    #[serde(default)]
    labels: BTreeMap<String, String>,
    #[serde(default)]
    annotations: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PodSpec {
    containers: Vec<Container>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Container {
    name: String,
    image: String,
    resources: Resources,
    #[serde(default)]
    resize_policy: Vec<ResizePolicy>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Resources {
    requests: Cpu,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    limits: Option<Cpu>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Cpu {
    cpu: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ResizePolicy {
    resource_name: String,
    restart_policy: String,
}

fn resize_policy() -> Vec<ResizePolicy> {
    vec![
        ResizePolicy {
            resource_name: "cpu".into(),
            restart_policy: "NotRequired".into(),
        },
        ResizePolicy {
            resource_name: "memory".into(),
            restart_policy: "RestartContainer".into(),
        },
    ]
}

/// Field-level view of each pod `emit_manifest` would write.
pub fn manifest_models(
    plan: &AllocationPlan,
    names: &[String],
) -> Result<Vec<PodManifestModel>, ArtifactError> {
    if names.len() != plan.len() {
        return Err(ArtifactError::NameCountMismatch {
            names: names.len(),
            ranks: plan.len(),
        });
    }
    Ok((0..plan.len())
        .map(|i| PodManifestModel {
            pod_name: names[i].clone(),
            rank_id: i,
            requests_cpu: format_millicores(plan.requests_millicores[i]),
            limits_cpu: match plan.mode {
                AllocationMode::HardLimits => plan.limit(i).map(format_millicores),
                AllocationMode::RequestsOnly => None,
            },
            resize_policy: resize_policy()
                .into_iter()
                .map(|p| (p.resource_name, p.restart_policy))
                .collect(),
        })
        .collect())
}

/// One pod document per rank, separated by `---`. Requests are always
/// set; limits only under hard limits. Each pod is annotated with its
/// exact fraction so [`parse_manifest`] can rebuild the plan.
pub fn emit_manifest(plan: &AllocationPlan, names: &[String]) -> Result<String, ArtifactError> {
    let models = manifest_models(plan, names)?;
    let mut out = String::new();
    for (i, m) in models.into_iter().enumerate() {
        let doc = PodDoc {
            api_version: "v1".into(),
            kind: "Pod".into(),
            metadata: Metadata {
                name: m.pod_name,
                labels: BTreeMap::from([(RANK_LABEL.to_string(), i.to_string())]),
                annotations: BTreeMap::from([
                    (MODE_KEY.to_string(), plan.mode.to_string()),
                    (BUDGET_KEY.to_string(), plan.budget_millicores.to_string()),
                    (FRACTION_KEY.to_string(), plan.fractions[i].to_string()),
                ]),
            },
            spec: PodSpec {
                containers: vec![Container {
                    name: "solver".into(),
                    image: "solver:latest".into(),
                    resources: Resources {
                        requests: Cpu {
                            cpu: m.requests_cpu,
                        },
                        limits: m.limits_cpu.map(|cpu| Cpu { cpu }),
                    },
                    resize_policy: resize_policy(),
                }],
            },
        };
        out.push_str("---\n");
        out.push_str(
            &serde_yaml::to_string(&doc)
                .map_err(|e| ArtifactError::MalformedManifest(e.to_string()))?,
        );
    }
    Ok(out)
}

/// Rebuilds the plan and pod names from [`emit_manifest`] output.
pub fn parse_manifest(text: &str) -> Result<(AllocationPlan, Vec<String>), ArtifactError> {
    let bad = |m: String| ArtifactError::MalformedManifest(m);
    let mut pods: Vec<(usize, PodDoc)> = Vec::new();
    for de in serde_yaml::Deserializer::from_str(text) {
        let doc = PodDoc::deserialize(de).map_err(|e| bad(e.to_string()))?;
        let rank = doc
            .metadata
            .labels
            .get(RANK_LABEL)
            .ok_or_else(|| bad(format!("pod {} has no rank label", doc.metadata.name)))?
            .parse::<usize>()
            .map_err(|e| bad(e.to_string()))?;
        pods.push((rank, doc));
    }
    if pods.is_empty() {
        return Err(bad("no pod documents".into()));
    }
    pods.sort_by_key(|(r, _)| *r);
    if let Some(rank) = pods
        .iter()
        .enumerate()
        .find(|(i, (r, _))| i != r)
        .map(|(i, _)| i)
    {
        return Err(bad(format!(
            "rank labels are not 0..{} (rank {rank})",
            pods.len()
        )));
    }

    let annotation = |doc: &PodDoc, key: &str| -> Result<String, ArtifactError> {
        doc.metadata
            .annotations
            .get(key)
            .cloned()
            .ok_or_else(|| bad(format!("pod {} lacks annotation {key}", doc.metadata.name)))
    };
    let mode: AllocationMode = annotation(&pods[0].1, MODE_KEY)?.parse().map_err(bad)?;
    let budget: u64 = annotation(&pods[0].1, BUDGET_KEY)?
        .parse()
        .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;

    let mut names = Vec::new();
    let mut requests = Vec::new();
    let mut limits = Vec::new();
    let mut fractions = Vec::new();
    for (_, doc) in &pods {
        let [container] = doc.spec.containers.as_slice() else {
            return Err(bad(format!(
                "pod {} must have exactly one container",
                doc.metadata.name
            )));
        };
        if annotation(doc, MODE_KEY)?
            .parse::<AllocationMode>()
            .map_err(bad)?
            != mode
        {
            return Err(bad("pods disagree on allocation mode".into()));
        }
        let cpu_policy = container
            .resize_policy
            .iter()
            .find(|p| p.resource_name == "cpu");
        if cpu_policy.map(|p| p.restart_policy.as_str()) != Some("NotRequired") {
            return Err(bad(format!(
                "pod {} cannot resize CPU in place",
                doc.metadata.name
            )));
        }
        names.push(doc.metadata.name.clone());
        requests.push(parse_millicores(&container.resources.requests.cpu)?);
        match (&container.resources.limits, mode) {
            (Some(l), AllocationMode::HardLimits) => limits.push(parse_millicores(&l.cpu)?),
            (None, AllocationMode::RequestsOnly) => {}
            _ => {
                return Err(bad(format!(
                    "pod {} limits do not match mode {mode}",
                    doc.metadata.name
                )))
            }
        }
        let f = annotation(doc, FRACTION_KEY)?;
        fractions
            .push(fraction_list::parse(&f).ok_or_else(|| bad(format!("invalid fraction `{f}`")))?);
    }
    let plan = AllocationPlan {
        requests_millicores: requests,
        limits_millicores: (mode == AllocationMode::HardLimits).then_some(limits),
        budget_millicores: budget,
        mode,
        fractions,
    };
    plan.validate()?;
    Ok((plan, names))
}

fn is_terminating(r: &Rational) -> bool {
    let mut d = r.denom();
    while d.is_multiple_of(2) {
        d /= 2;
    }
    while d.is_multiple_of(5) {
        d /= 5;
    }
    d == 1
}

/// Exact decimal rendering of a rational with a terminating expansion.
fn decimal(r: &Rational) -> String {
    let (n, d) = (r.numer(), r.denom());
    if d == 1 {
        return n.to_string();
    }
    let mut digits = 0u32;
    let mut scale = 1u128;
    while !(scale * n as u128).is_multiple_of(d as u128) {
        scale *= 10;
        digits += 1;
    }
    let scaled = scale * n as u128 / d as u128;
    let whole = scaled / scale;
    let frac = scaled % scale;
    format!("{whole}.{frac:0width$}", width = digits as usize)
}

/// `processorWeights` list for a decomposition dictionary. Weights with a
/// terminating decimal expansion print as-is; otherwise the whole vector is
/// scaled to the smallest integers with the same ratios.
pub fn emit_processor_weights(weights: &WeightVector) -> Result<String, ArtifactError> {
    let entries: Vec<String> = if weights.as_slice().iter().all(is_terminating) {
        weights.as_slice().iter().map(decimal).collect()
    } else {
        weights.to_integers()?.iter().map(u128::to_string).collect()
    };
    let mut out = String::from("processorWeights\n(\n");
    for e in entries {
        let _ = writeln!(out, "    {e}");
    }
    out.push_str(");\n");
    Ok(out)
}

/// Reads a `processorWeights ( ... );` list; comments are not supported.
pub fn parse_processor_weights(text: &str) -> Result<WeightVector, ArtifactError> {
    let bad = |m: &str| ArtifactError::MalformedWeights(m.to_string());
    let rest = text
        .trim_start()
        .strip_prefix("processorWeights")
        .ok_or_else(|| bad("missing keyword"))?;
    let rest = rest
        .trim_start()
        .strip_prefix('(')
        .ok_or_else(|| bad("missing `(`"))?;
    let (body, tail) = rest.split_once(')').ok_or_else(|| bad("missing `)`"))?;
    if tail.trim() != ";" {
        return Err(bad("expected `);` after the list"));
    }
    let weights = body
        .split_whitespace()
        .map(|t| {
            t.parse::<Rational>()
                .map_err(|e| ArtifactError::MalformedWeights(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(WeightVector::new(weights)?)
}

/// Cell counts per subdomain, as produced by the domain decomposition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub n_subdomains: usize,
    pub cells_per_subdomain: Vec<u64>,
}

impl DecompositionReport {
    pub fn new(cells_per_subdomain: Vec<u64>) -> Self {
        DecompositionReport {
            n_subdomains: cells_per_subdomain.len(),
            cells_per_subdomain,
        }
    }

    /// Cell counts divided by their greatest common divisor.
    pub fn derived_weights(&self) -> Result<WeightVector, ArtifactError> {
        let g = self
            .cells_per_subdomain
            .iter()
            .fold(0u64, |acc, &c| acc.gcd(&c));
        if g == 0 {
            return Err(AllocError::EmptyWeights.into());
        }
        Ok(WeightVector::from_integers(
            &self
                .cells_per_subdomain
                .iter()
                .map(|&c| c / g)
                .collect::<Vec<_>>(),
        )?)
    }
}

/// `rank,cells` CSV, one row per subdomain.
pub fn emit_decomposition_report(report: &DecompositionReport, header: bool) -> String {
    let mut out = String::new();
    if header {
        out.push_str("rank,cells\n");
    }
    for (rank, cells) in report.cells_per_subdomain.iter().enumerate() {
        let _ = writeln!(out, "{rank},{cells}");
    }
    out
}

/// Reads a `rank,cells` CSV (header optional, rows in any order) and
/// derives the weight vector.
pub fn ingest_decomposition_report(
    text: &str,
) -> Result<(DecompositionReport, WeightVector), ArtifactError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut cells: BTreeMap<usize, u64> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| ArtifactError::MalformedReport {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != 2 {
            return Err(ArtifactError::MalformedReport {
                line,
                reason: format!("expected 2 fields, found {}", record.len()),
            });
        }
        if line == 1 && &record[0] == "rank" && &record[1] == "cells" {
            continue;
        }
        let field = |k: usize| {
            record[k]
                .parse::<u64>()
                .map_err(|e| ArtifactError::MalformedReport {
                    line,
                    reason: format!("`{}`: {e}", &record[k]),
                })
        };
        let rank = field(0)? as usize;
        if cells.insert(rank, field(1)?).is_some() {
            return Err(ArtifactError::MalformedReport {
                line,
                reason: format!("rank {rank} appears twice"),
            });
        }
    }
    if cells.is_empty() {
        return Err(ArtifactError::MalformedReport {
            line: 0,
            reason: "no rows".into(),
        });
    }
    if let Some(rank) = cells
        .keys()
        .enumerate()
        .find(|(i, r)| i != *r)
        .map(|(i, _)| i)
    {
        return Err(ArtifactError::RankGap { rank });
    }
    let report = DecompositionReport::new(cells.into_values().collect());
    let weights = report.derived_weights()?;
    Ok((report, weights))
}
