//! Load-proportional CPU allocation.
//!
//! A decomposition weight vector `w` gives each rank the cell fraction
//! `f_i = w_i / sum(w)`. The same fractions split a milli-core budget, so the
//! CPU-to-cell ratio is identical on every rank. Fractions stay exact
//! rationals until the final largest-remainder step, which guarantees that
//! the integer requests add up to the budget.

use std::cmp::Ordering;
use std::fmt;

use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{CheckedAdd, One, Zero};
use serde::{Deserialize, Serialize};

use crate::rational::Rational;
use crate::{DEFAULT_PERIOD_USEC, SINGLE_THREAD_MILLICORES};

/// Exact fraction of a whole.
pub type Fraction = Ratio<u128>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AllocError {
    #[error("weight vector is empty")]
    EmptyWeights,
    #[error("weight {index} is not positive")]
    NonPositiveWeight { index: usize },
    #[error("fractions sum to {sum}, expected 1")]
    FractionsDoNotSumToOne { sum: String },
    #[error("total {unit} must be positive")]
    ZeroTotal { unit: String },
    #[error("budget of {budget}m leaves rank {rank} with a zero request ({ranks} ranks)")]
    BudgetTooSmall {
        budget: u64,
        ranks: usize,
        rank: usize,
    },
    #[error("limit {limit_millicores}m with period {period_usec}us does not give a whole-microsecond quota")]
    NonIntegralQuota {
        limit_millicores: u64,
        period_usec: u64,
    },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("arithmetic overflow while {0}")]
    Overflow(&'static str),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

/// Per-rank decomposition weights; every entry is strictly positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<Rational>);

impl WeightVector {
    pub fn new(weights: Vec<Rational>) -> Result<Self, AllocError> {
        if weights.is_empty() {
            return Err(AllocError::EmptyWeights);
        }
        if let Some(index) = weights.iter().position(Rational::is_zero) {
            return Err(AllocError::NonPositiveWeight { index });
        }
        Ok(WeightVector(weights))
    }

    pub fn from_integers(weights: &[u64]) -> Result<Self, AllocError> {
        Self::new(weights.iter().copied().map(Rational::integer).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Rational] {
        &self.0
    }

    /// Smallest integer vector with the same ratios.
    pub fn to_integers(&self) -> Result<Vec<u128>, AllocError> {
        let lcm = self
            .0
            .iter()
            .try_fold(1u128, |acc, w| {
                let d = w.denom() as u128;
                (acc / acc.gcd(&d)).checked_mul(d)
            })
            .ok_or(AllocError::Overflow(
                "scaling weights to a common denominator",
            ))?;
        let scaled = self
            .0
            .iter()
            .map(|w| (w.numer() as u128).checked_mul(lcm / w.denom() as u128))
            .collect::<Option<Vec<_>>>()
            .ok_or(AllocError::Overflow(
                "scaling weights to a common denominator",
            ))?;
        let g = scaled.iter().fold(0u128, |acc, v| acc.gcd(v));
        Ok(scaled.into_iter().map(|v| v / g).collect())
    }
}

impl<'de> Deserialize<'de> for WeightVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = Vec::<Rational>::deserialize(deserializer)?;
        WeightVector::new(raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationMode {
    /// Requests and limits both set (Guaranteed QoS); CFS quota enforced.
    #[serde(alias = "HardLimits", alias = "hard_limits")]
    HardLimits,
    /// Requests only (Burstable QoS); proportional share, no quota.
    #[serde(alias = "RequestsOnly", alias = "requests_only")]
    RequestsOnly,
}

impl fmt::Display for AllocationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AllocationMode::HardLimits => "hard-limits",
            AllocationMode::RequestsOnly => "requests-only",
        })
    }
}

impl std::str::FromStr for AllocationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "hard-limits" | "hardlimits" | "guaranteed" => Ok(AllocationMode::HardLimits),
            "requests-only" | "requestsonly" | "burstable" => Ok(AllocationMode::RequestsOnly),
            other => Err(format!("unknown allocation mode `{other}`")),
        }
    }
}

/// Per-rank milli-core requests (and limits in hard-limit mode).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub requests_millicores: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits_millicores: Option<Vec<u64>>,
    pub budget_millicores: u64,
    pub mode: AllocationMode,
    #[serde(with = "fraction_list")]
    pub fractions: Vec<Fraction>,
}

impl AllocationPlan {
    /// Builds a plan from explicit per-rank requests. Fractions are the
    /// request shares of the total; hard-limit plans default limits to the
    /// requests.
    pub fn from_requests(
        requests_millicores: Vec<u64>,
        limits_millicores: Option<Vec<u64>>,
        mode: AllocationMode,
    ) -> Result<Self, AllocError> {
        let budget: u64 = requests_millicores.iter().sum();
        if budget == 0 {
            return Err(AllocError::ZeroTotal {
                unit: "millicores".into(),
            });
        }
        let fractions = requests_millicores
            .iter()
            .map(|&r| Fraction::new(r as u128, budget as u128))
            .collect();
        let limits_millicores = match mode {
            AllocationMode::HardLimits => {
                Some(limits_millicores.unwrap_or_else(|| requests_millicores.clone()))
            }
            AllocationMode::RequestsOnly => limits_millicores,
        };
        let plan = AllocationPlan {
            requests_millicores,
            limits_millicores,
            budget_millicores: budget,
            mode,
            fractions,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.requests_millicores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests_millicores.is_empty()
    }

    pub fn total_requests(&self) -> u64 {
        self.requests_millicores.iter().sum()
    }

    pub fn limit(&self, rank: usize) -> Option<u64> {
        self.limits_millicores.as_ref().map(|l| l[rank])
    }

    pub fn validate(&self) -> Result<(), AllocError> {
        let invalid = |msg: String| Err(AllocError::InvalidPlan(msg));
        if self.requests_millicores.is_empty() {
            return invalid("no ranks".into());
        }
        if self.fractions.len() != self.requests_millicores.len() {
            return invalid("fraction count differs from rank count".into());
        }
        if self.total_requests() != self.budget_millicores {
            return invalid(format!(
                "requests sum to {}m, budget is {}m",
                self.total_requests(),
                self.budget_millicores
            ));
        }
        let sum = self
            .fractions
            .iter()
            .try_fold(Fraction::zero(), |acc, f| acc.checked_add(f))
            .ok_or(AllocError::Overflow("summing fractions"))?;
        if !sum.is_one() {
            return invalid(format!("fractions sum to {sum}"));
        }
        match (self.mode, &self.limits_millicores) {
            (AllocationMode::HardLimits, None) => invalid("hard-limit plan without limits".into()),
            (AllocationMode::HardLimits, Some(limits)) => {
                if limits.len() != self.requests_millicores.len() {
                    return invalid("limit count differs from rank count".into());
                }
                if let Some(i) =
                    (0..limits.len()).find(|&i| limits[i] < self.requests_millicores[i])
                {
                    return invalid(format!("rank {i} limit is below its request"));
                }
                Ok(())
            }
            (AllocationMode::RequestsOnly, Some(_)) => {
                invalid("requests-only plan must not carry limits".into())
            }
            (AllocationMode::RequestsOnly, None) => Ok(()),
        }
    }

    /// cgroup parameters realising this plan with the given CFS period.
    pub fn cgroup_params(&self, period_usec: u64) -> Result<Vec<CgroupParams>, AllocError> {
        (0..self.len())
            .map(|i| {
                let request = self.requests_millicores[i];
                match self.mode {
                    AllocationMode::HardLimits => {
                        let limit = self.limit(i).unwrap_or(request);
                        let mut params = quota_for_limit(limit, period_usec)?;
                        params.cpu_weight = request.max(1);
                        Ok(params)
                    }
                    AllocationMode::RequestsOnly => Ok(CgroupParams {
                        quota_usec: Quota::Unlimited,
                        period_usec,
                        cpu_weight: request.max(1),
                    }),
                }
            })
            .collect()
    }
}

/// CFS bandwidth quota per period, as written to `cpu.max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quota {
    Unlimited,
    Bounded(u64),
}

impl Quota {
    pub fn bounded(&self) -> Option<u64> {
        match self {
            Quota::Unlimited => None,
            Quota::Bounded(q) => Some(*q),
        }
    }
}

impl fmt::Display for Quota {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Quota::Unlimited => f.write_str("max"),
            Quota::Bounded(q) => write!(f, "{q}"),
        }
    }
}

impl Serialize for Quota {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Quota::Unlimited => serializer.serialize_str("max"),
            Quota::Bounded(q) => serializer.serialize_u64(*q),
        }
    }
}

impl<'de> Deserialize<'de> for Quota {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(0) => Err(serde::de::Error::custom("quota must be positive")),
            Raw::Num(q) => Ok(Quota::Bounded(q)),
            Raw::Text(s) if s == "max" || s.eq_ignore_ascii_case("unlimited") => {
                Ok(Quota::Unlimited)
            }
            Raw::Text(s) => match s.parse::<u64>() {
                Ok(q) if q > 0 => Ok(Quota::Bounded(q)),
                _ => Err(serde::de::Error::custom(format!("invalid quota `{s}`"))),
            },
        }
    }
}

/// The `(quota, period, weight)` triple the kernel sees for one rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CgroupParams {
    pub quota_usec: Quota,
    #[serde(default = "default_period")]
    pub period_usec: u64,
    pub cpu_weight: u64,
}

fn default_period() -> u64 {
    DEFAULT_PERIOD_USEC
}

impl CgroupParams {
    pub fn unlimited(cpu_weight: u64) -> Self {
        CgroupParams {
            quota_usec: Quota::Unlimited,
            period_usec: DEFAULT_PERIOD_USEC,
            cpu_weight,
        }
    }

    /// Limit in milli-cores implied by the quota, if bounded.
    pub fn limit_millicores(&self) -> Option<u64> {
        self.quota_usec
            .bounded()
            .map(|q| q * 1000 / self.period_usec)
    }
}

/// Cells assigned to each subdomain; sums to the mesh size exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellApportionment {
    pub total_cells: u64,
    pub cells_per_rank: Vec<u64>,
}

/// Exact cell fractions `w_i / sum(w)`.
pub fn cell_fractions(weights: &WeightVector) -> Result<Vec<Fraction>, AllocError> {
    let ints = weights.to_integers()?;
    let total = ints
        .iter()
        .try_fold(0u128, |acc, &w| acc.checked_add(w))
        .ok_or(AllocError::Overflow("summing weights"))?;
    Ok(ints.into_iter().map(|w| Fraction::new(w, total)).collect())
}

/// Largest-remainder (Hamilton) apportionment of `total` units.
///
/// Each entry gets the floor of its exact share; the units left over go to
/// the largest fractional remainders, lowest rank first on ties. `unit` only
/// labels error messages.
pub fn apportion_exact(
    fractions: &[Fraction],
    total: u64,
    unit: &str,
) -> Result<Vec<u64>, AllocError> {
    if fractions.is_empty() {
        return Err(AllocError::EmptyWeights);
    }
    if total == 0 {
        return Err(AllocError::ZeroTotal {
            unit: unit.to_string(),
        });
    }
    let sum = fractions
        .iter()
        .try_fold(Fraction::zero(), |acc, f| acc.checked_add(f))
        .ok_or(AllocError::Overflow("summing fractions"))?;
    if !sum.is_one() {
        return Err(AllocError::FractionsDoNotSumToOne {
            sum: sum.to_string(),
        });
    }

    let mut floors = Vec::with_capacity(fractions.len());
    let mut remainders = Vec::with_capacity(fractions.len());
    for f in fractions {
        let scaled = f
            .numer()
            .checked_mul(total as u128)
            .ok_or(AllocError::Overflow("scaling fractions"))?;
        let (q, r) = scaled.div_rem(f.denom());
        floors.push(q as u64);
        remainders.push(Fraction::new(r, *f.denom()));
    }
    let assigned: u64 = floors.iter().sum();
    let leftover = (total - assigned) as usize;

    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| match remainders[b].cmp(&remainders[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    for &i in order.iter().take(leftover) {
        floors[i] += 1;
    }
    Ok(floors)
}

/// Cells per rank for a mesh of `total_cells` split by `weights`.
pub fn apportion_cells(
    weights: &WeightVector,
    total_cells: u64,
) -> Result<CellApportionment, AllocError> {
    let cells_per_rank = apportion_exact(&cell_fractions(weights)?, total_cells, "cells")?;
    Ok(CellApportionment {
        total_cells,
        cells_per_rank,
    })
}

/// Splits `budget_millicores` across ranks in proportion to `weights`.
pub fn allocate_cpu(
    weights: &WeightVector,
    budget_millicores: u64,
    mode: AllocationMode,
) -> Result<AllocationPlan, AllocError> {
    let fractions = cell_fractions(weights)?;
    if budget_millicores < weights.len() as u64 {
        return Err(AllocError::BudgetTooSmall {
            budget: budget_millicores,
            ranks: weights.len(),
            rank: 0,
        });
    }
    let requests = apportion_exact(&fractions, budget_millicores, "millicores")?;
    if let Some(rank) = requests.iter().position(|&r| r == 0) {
        return Err(AllocError::BudgetTooSmall {
            budget: budget_millicores,
            ranks: weights.len(),
            rank,
        });
    }
    let limits = match mode {
        AllocationMode::HardLimits => Some(requests.clone()),
        AllocationMode::RequestsOnly => None,
    };
    Ok(AllocationPlan {
        requests_millicores: requests,
        limits_millicores: limits,
        budget_millicores,
        mode,
        fractions,
    })
}

/// `q = L * P`, with `L` in milli-cores; the quota must be whole microseconds.
pub fn quota_for_limit(
    limit_millicores: u64,
    period_usec: u64,
) -> Result<CgroupParams, AllocError> {
    if limit_millicores == 0 {
        return Err(AllocError::NonPositive("limit"));
    }
    if period_usec == 0 {
        return Err(AllocError::NonPositive("period"));
    }
    let product = limit_millicores
        .checked_mul(period_usec)
        .ok_or(AllocError::Overflow("computing quota"))?;
    if product % 1000 != 0 {
        return Err(AllocError::NonIntegralQuota {
            limit_millicores,
            period_usec,
        });
    }
    Ok(CgroupParams {
        quota_usec: Quota::Bounded(product / 1000),
        period_usec,
        cpu_weight: limit_millicores,
    })
}

/// Fraction of a core a single-threaded rank can use; used to cap shares.
pub fn single_thread_cap(demand_millicores: u64) -> u64 {
    demand_millicores.min(SINGLE_THREAD_MILLICORES)
}

pub(crate) mod fraction_list {
    use super::Fraction;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        fractions: &[Fraction],
        serializer: S,
    ) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(fractions.iter().map(|f| f.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<Vec<Fraction>, D::Error> {
        let raw = Vec::<String>::deserialize(deserializer)?;
        raw.iter()
            .map(|s| {
                parse(s).ok_or_else(|| serde::de::Error::custom(format!("invalid fraction `{s}`")))
            })
            .collect()
    }

    pub fn parse(s: &str) -> Option<Fraction> {
        match s.split_once('/') {
            Some((n, d)) => {
                let d: u128 = d.trim().parse().ok()?;
                let n: u128 = n.trim().parse().ok()?;
                (d != 0).then(|| Fraction::new(n, d))
            }
            None => Some(Fraction::from_integer(s.trim().parse().ok()?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: &[u64]) -> WeightVector {
        WeightVector::from_integers(v).unwrap()
    }

    fn fr(n: u128, d: u128) -> Fraction {
        Fraction::new(n, d)
    }

    #[test]
    fn fractions_of_the_worked_example() {
        assert_eq!(
            cell_fractions(&w(&[1, 1, 5, 15])).unwrap(),
            vec![fr(1, 22), fr(1, 22), fr(5, 22), fr(15, 22)]
        );
        assert_eq!(cell_fractions(&w(&[1])).unwrap(), vec![fr(1, 1)]);
        assert_eq!(
            cell_fractions(&w(&[2, 2, 2, 2])).unwrap(),
            vec![fr(1, 4); 4]
        );
    }

    #[test]
    fn fractional_weights_are_exact() {
        let weights =
            WeightVector::new(vec!["0.5".parse().unwrap(), "1/3".parse().unwrap()]).unwrap();
        assert_eq!(cell_fractions(&weights).unwrap(), vec![fr(3, 5), fr(2, 5)]);
    }

    #[test]
    fn rejects_bad_weights() {
        assert_eq!(
            WeightVector::from_integers(&[]),
            Err(AllocError::EmptyWeights)
        );
        assert_eq!(
            WeightVector::from_integers(&[1, 0, 2]),
            Err(AllocError::NonPositiveWeight { index: 1 })
        );
        assert!(serde_json::from_str::<WeightVector>("[1, 0]").is_err());
    }

    #[test]
    fn apportionment_vectors() {
        let f = cell_fractions(&w(&[1, 1, 5, 15])).unwrap();
        assert_eq!(
            apportion_exact(&f, 4000, "m").unwrap(),
            vec![182, 182, 909, 2727]
        );
        assert_eq!(
            apportion_exact(&f, 12225, "cells").unwrap(),
            vec![556, 556, 2778, 8335]
        );
        let f = cell_fractions(&w(&[4, 3, 2, 1])).unwrap();
        assert_eq!(
            apportion_exact(&f, 16200, "cells").unwrap(),
            vec![6480, 4860, 3240, 1620]
        );
    }

    #[test]
    fn ties_go_to_lowest_rank() {
        let f = vec![fr(1, 3); 3];
        assert_eq!(apportion_exact(&f, 4, "u").unwrap(), vec![2, 1, 1]);
        assert_eq!(apportion_exact(&f, 5, "u").unwrap(), vec![2, 2, 1]);
    }

    #[test]
    fn apportion_rejects_non_unit_sum() {
        assert!(matches!(
            apportion_exact(&[fr(1, 2), fr(1, 3)], 10, "u"),
            Err(AllocError::FractionsDoNotSumToOne { .. })
        ));
        assert!(matches!(
            apportion_exact(&[fr(1, 1)], 0, "u"),
            Err(AllocError::ZeroTotal { .. })
        ));
    }

    #[test]
    fn allocate_modes() {
        let plan = allocate_cpu(&w(&[1, 1, 5, 15]), 4000, AllocationMode::RequestsOnly).unwrap();
        assert_eq!(plan.requests_millicores, vec![182, 182, 909, 2727]);
        assert!(plan.limits_millicores.is_none());
        plan.validate().unwrap();

        let plan = allocate_cpu(&w(&[1, 1, 1, 1]), 4000, AllocationMode::HardLimits).unwrap();
        assert_eq!(plan.requests_millicores, vec![1000; 4]);
        assert_eq!(plan.limits_millicores, Some(vec![1000; 4]));
    }

    #[test]
    fn sixteen_rank_grouped_plan() {
        let weights: Vec<u64> = [1, 1, 5, 15].iter().flat_map(|&x| [x; 4]).collect();
        let plan = allocate_cpu(&w(&weights), 16000, AllocationMode::RequestsOnly).unwrap();
        let r = &plan.requests_millicores;
        assert_eq!(r.iter().filter(|&&x| x == 182).count(), 8);
        assert_eq!(r.iter().filter(|&&x| x == 909).count(), 4);
        assert_eq!(r.iter().filter(|&&x| x == 2727).count(), 4);
        assert_eq!(r.iter().sum::<u64>(), 16000);
    }

    #[test]
    fn budget_guard() {
        assert!(matches!(
            allocate_cpu(&w(&[1, 1]), 1, AllocationMode::RequestsOnly),
            Err(AllocError::BudgetTooSmall { .. })
        ));
        // Enough millicores overall but the small rank rounds to zero.
        assert!(matches!(
            allocate_cpu(&w(&[1, 1000]), 10, AllocationMode::RequestsOnly),
            Err(AllocError::BudgetTooSmall { rank: 0, .. })
        ));
        assert_eq!(
            allocate_cpu(&w(&[1]), 1000, AllocationMode::RequestsOnly)
                .unwrap()
                .requests_millicores,
            vec![1000]
        );
    }

    #[test]
    fn quota_formula() {
        assert_eq!(
            quota_for_limit(250, 100_000).unwrap().quota_usec,
            Quota::Bounded(25_000)
        );
        assert_eq!(
            quota_for_limit(1000, 100_000).unwrap().quota_usec,
            Quota::Bounded(100_000)
        );
        // independent product: 2727 m is 2.727 cores, times 100 ms
        assert_eq!(
            quota_for_limit(2727, 100_000).unwrap().quota_usec,
            Quota::Bounded(2727 * 100)
        );
        assert_eq!(
            quota_for_limit(1, 999),
            Err(AllocError::NonIntegralQuota {
                limit_millicores: 1,
                period_usec: 999
            })
        );
        assert!(quota_for_limit(0, 100_000).is_err());
    }

    #[test]
    fn plan_cgroups_follow_mode() {
        let plan = allocate_cpu(&w(&[1, 1, 5, 15]), 4000, AllocationMode::HardLimits).unwrap();
        let cg = plan.cgroup_params(100_000).unwrap();
        assert_eq!(cg[3].quota_usec, Quota::Bounded(272_700));
        assert_eq!(cg[0].limit_millicores(), Some(182));
        let plan = allocate_cpu(&w(&[1, 1, 5, 15]), 4000, AllocationMode::RequestsOnly).unwrap();
        let cg = plan.cgroup_params(100_000).unwrap();
        assert!(cg.iter().all(|c| c.quota_usec == Quota::Unlimited));
        assert_eq!(
            cg.iter().map(|c| c.cpu_weight).collect::<Vec<_>>(),
            vec![182, 182, 909, 2727]
        );
    }

    #[test]
    fn plan_json_round_trip() {
        let plan = allocate_cpu(&w(&[1, 1, 5, 15]), 4000, AllocationMode::HardLimits).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.contains("\"1/22\""));
        let back: AllocationPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn validate_catches_inconsistent_plans() {
        let mut plan = allocate_cpu(&w(&[1, 1]), 2000, AllocationMode::HardLimits).unwrap();
        plan.limits_millicores = Some(vec![500, 1000]);
        assert!(plan.validate().is_err());
        plan.limits_millicores = None;
        assert!(plan.validate().is_err());
        let mut plan = allocate_cpu(&w(&[1, 1]), 2000, AllocationMode::RequestsOnly).unwrap();
        plan.requests_millicores[0] += 1;
        assert!(plan.validate().is_err());
    }
}
