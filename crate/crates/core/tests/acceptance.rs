//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use num_rational::Ratio;
use proptest::prelude::*;

use common::{hard, one_node, rank, runner};
use rankshare::alloc::{
    allocate_cpu, apportion_cells, quota_for_limit, AllocationMode, AllocationPlan, Quota,
};
use rankshare::artifacts::{
    emit_decomposition_report, emit_manifest, ingest_decomposition_report, parse_manifest,
    DecompositionReport,
};
use rankshare::metrics::{
    cpu_hours, packing_headroom, reclaimed_millicores, resource_efficiency, Exact, Placement,
    UsageSeries,
};
use rankshare::scaling::{
    apply_plan_in_sim, phase_allocation, PatchEntry, PatchPlan, PhaseSchedule, Trigger,
};
use rankshare::scenario::{bundled, BUNDLED};
use rankshare::sim::{step_period_oracle, BarrierWait, NodeSpec, SimError, Simulator, UsageSample};
use rankshare::{simulate, CgroupParams, WeightVector};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn weights(v: &[u64]) -> WeightVector {
    WeightVector::from_integers(v).unwrap()
}

fn grouped_weights() -> Vec<u64> {
    let mut w = vec![1u64; 8];
    w.extend([5; 4]);
    w.extend([15; 4]);
    w
}

fn allocation_exactness() -> Outcome {
    let plan = allocate_cpu(&weights(&[1, 1, 5, 15]), 4000, AllocationMode::RequestsOnly)
        .map_err(|e| e.to_string())?;
    check(
        plan.requests_millicores == [182, 182, 909, 2727],
        format!("got {:?}", plan.requests_millicores),
    )?;
    check(plan.total_requests() == 4000, "sum is not 4000")?;
    Ok("(1,1,5,15) over 4000m -> 182/182/909/2727, sum 4000".into())
}

fn cell_apportionment() -> Outcome {
    let cells = apportion_cells(&weights(&[1, 1, 5, 15]), 12225).map_err(|e| e.to_string())?;
    check(
        cells.cells_per_rank == [556, 556, 2778, 8335],
        format!("got {:?}", cells.cells_per_rank),
    )?;
    check(
        cells.cells_per_rank.iter().sum::<u64>() == 12225,
        "sum is not 12225",
    )?;
    Ok("12225 cells -> 556/556/2778/8335".into())
}

fn grouped_sixteen_rank_plan() -> Outcome {
    let plan = allocate_cpu(
        &weights(&grouped_weights()),
        16_000,
        AllocationMode::RequestsOnly,
    )
    .map_err(|e| e.to_string())?;
    let mut expected = vec![182u64; 8];
    expected.extend([909; 4]);
    expected.extend([2727; 4]);
    check(
        plan.requests_millicores == expected,
        format!("got {:?}", plan.requests_millicores),
    )?;
    check(plan.total_requests() == 16_000, "sum is not 16000")?;
    let freed = reclaimed_millicores(&[1000; 16], &plan.requests_millicores);
    check(
        freed.far_field_millicores == 6544,
        format!("freed {}", freed.far_field_millicores),
    )?;

    // The bundled scenario must agree with the direct computation.
    let r = bundled("sixteen_rank_grouped")
        .unwrap()
        .resolve()
        .map_err(|e| e.to_string())?;
    check(
        r.plan.requests_millicores == expected,
        "bundled scenario disagrees",
    )?;
    Ok(format!(
        "8x182 + 4x909 + 4x2727 = 16000m; far-field ranks free {}m vs 1000m each",
        freed.far_field_millicores
    ))
}

fn quota_formula() -> Outcome {
    let p = quota_for_limit(250, 100_000).map_err(|e| e.to_string())?;
    check(
        p.quota_usec == Quota::Bounded(25_000),
        format!("got {}", p.quota_usec),
    )?;
    Ok("250m at 100ms -> 25000us".into())
}

fn throttle_oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let horizon = 1_000_000;
    let mut cases = 0;
    for quota_ms in [25u64, 50, 75, 100] {
        for demand in (1..=10u64).map(|d| d * 100) {
            let mut profile = rank(1_000_000, hard(quota_ms * 10), 1);
            profile.demand_millicores = demand;
            let s = one_node(vec![profile], 1000, AllocationMode::HardLimits, 1);
            let mut sim = Simulator::new(&s).map_err(|e| e.to_string())?;
            sim.run_until(horizon).map_err(|e| e.to_string())?;
            let got = sim.counters(0);
            let want = step_period_oracle(quota_ms * 1000, 100_000, demand, horizon);
            check(
                (got.nr_throttled, got.throttled_usec) == (want.nr_throttled, want.throttled_usec),
                format!("quota {quota_ms}ms demand {demand}m: {got:?} vs {want:?}"),
            )?;
            cases += 1;
        }
    }
    let took = started.elapsed();
    check(took < Duration::from_secs(1), format!("took {took:?}"))?;
    Ok(format!(
        "{cases} (quota, demand) pairs agree exactly in {} ms",
        took.as_millis()
    ))
}

fn sustained_deficit() -> Outcome {
    let period = 100_000u64;
    for horizon in [1_000_000u64, 1_050_000, 1_234_567, 3_000_000, 9_999_999] {
        let s = one_node(
            vec![rank(100_000_000, hard(250), 1)],
            1000,
            AllocationMode::HardLimits,
            1,
        );
        let mut sim = Simulator::new(&s).map_err(|e| e.to_string())?;
        sim.run_until(horizon).map_err(|e| e.to_string())?;
        let throttled = sim.counters(0).throttled_usec;
        check(
            throttled.abs_diff(horizon * 3 / 4) <= period,
            format!("horizon {horizon}: throttled {throttled}"),
        )?;
    }
    let mut worst = 0;
    for work_usec in [100_000u64, 1_000_000, 2_500_017] {
        let s = one_node(
            vec![rank(work_usec, hard(250), 1)],
            1000,
            AllocationMode::HardLimits,
            1,
        );
        let wall = simulate(&s).map_err(|e| e.to_string())?.wall_clock_usec;
        let err = wall.abs_diff(4 * work_usec);
        check(err <= period, format!("work {work_usec}: wall {wall}"))?;
        worst = worst.max(err);
    }
    Ok(format!(
        "throttled 75% +- one period; slowdown 4x within {worst}us"
    ))
}

fn requests_only_zero_throttle() -> Outcome {
    let mut checked = Vec::new();
    for name in BUNDLED {
        let file = bundled(name).unwrap();
        if file.mode != AllocationMode::RequestsOnly {
            continue;
        }
        let r = file
            .resolve()
            .and_then(|r| r.run())
            .map_err(|e| format!("{name}: {e}"))?;
        for (i, x) in r.per_rank.iter().enumerate() {
            check(
                x.nr_throttled == 0 && x.throttled_usec == 0,
                format!(
                    "{name} rank {i}: {} events, {}us",
                    x.nr_throttled, x.throttled_usec
                ),
            )?;
        }
        checked.push(name);
    }
    check(
        checked.len() >= 3,
        "too few requests-only scenarios bundled",
    )?;
    Ok(format!("zero counters in {}", checked.join(", ")))
}

fn synchronization_amplification() -> Outcome {
    let c3 = bundled("c3_hard_limits").unwrap();
    check(
        c3.requests_millicores.as_deref() == Some(&[250, 250, 1000, 2500][..])
            && c3.mode == AllocationMode::HardLimits
            && c3.demand_millicores == 1000,
        "c3 scenario does not have limits 250/250/1000/2500 at 1000m demand",
    )?;
    let run = |name: &str, k: u32| -> Result<u64, String> {
        let mut f = bundled(name).unwrap();
        f.comm_rounds_per_iter = k;
        Ok(f.resolve()
            .and_then(|r| r.run())
            .map_err(|e| e.to_string())?
            .wall_clock_usec)
    };
    let mut ratios = Vec::new();
    for k in [1u32, 2, 4, 8, 16] {
        let slowdown = run("c3_hard_limits", k)? as f64 / run("c2_equal", k)? as f64;
        ratios.push((k, slowdown));
    }
    for &(k, s) in &ratios {
        check(s > 4.0, format!("K={k}: slowdown {s:.2}x"))?;
        if k >= 8 {
            check(s > 10.0, format!("K={k}: slowdown {s:.2}x"))?;
        }
    }
    check(
        ratios.windows(2).all(|w| w[1].1 >= w[0].1),
        format!("not monotone in K: {ratios:?}"),
    )?;
    let shown: Vec<String> = ratios
        .iter()
        .map(|(k, s)| format!("K={k} {s:.2}x"))
        .collect();
    Ok(shown.join(", "))
}

#[derive(Debug, Clone)]
struct CouplingCase {
    cells: Vec<u64>,
    limits: Vec<u64>,
    k: u32,
    latency: u64,
    iterations: u64,
    hard_limits: bool,
    spin: bool,
    capacity: u64,
}

fn coupling_case() -> impl Strategy<Value = CouplingCase> {
    (
        2usize..=5,
        1u32..=6,
        0u64..=50,
        1u64..=3,
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_flat_map(|(n, k, latency, iterations, hard_limits, spin, roomy)| {
            let capacity = if roomy {
                Just(n as u64 * 1000).boxed()
            } else {
                (500u64..=n as u64 * 1000).boxed()
            };
            (
                prop::collection::vec(1u64..=4000, n),
                prop::collection::vec(
                    prop::sample::select(vec![100u64, 250, 400, 500, 750, 1000]),
                    n,
                ),
                capacity,
            )
                .prop_map(move |(cells, limits, capacity)| CouplingCase {
                    cells,
                    limits,
                    k,
                    latency,
                    iterations,
                    hard_limits,
                    spin,
                    capacity,
                })
        })
}

/// Chunk sizes for `work` split into `k` near-equal parts, larger first.
fn chunks(work: u64, k: u32) -> Vec<u64> {
    let k = k as u64;
    (0..k).map(|r| work / k + u64::from(r < work % k)).collect()
}

fn barrier_coupling() -> Outcome {
    let result = runner(1000).run(&coupling_case(), |case| {
        let mode = if case.hard_limits {
            AllocationMode::HardLimits
        } else {
            AllocationMode::RequestsOnly
        };
        let ranks = case
            .cells
            .iter()
            .zip(&case.limits)
            .map(|(&c, &l)| {
                rank(
                    c,
                    if case.hard_limits {
                        hard(l)
                    } else {
                        CgroupParams::unlimited(l)
                    },
                    case.k,
                )
            })
            .collect();
        let mut s = one_node(ranks, case.capacity, mode, case.iterations);
        s.barrier_latency_usec = case.latency;
        s.barrier_wait = if case.spin {
            BarrierWait::Spin
        } else {
            BarrierWait::Block
        };
        s.record_rounds = true;
        let r = simulate(&s).unwrap();
        prop_assert_eq!(r.per_iteration_wall_usec.len() as u64, case.iterations);
        prop_assert_eq!(r.rounds.len() as u64, case.iterations * case.k as u64);
        for (i, wall) in r.per_iteration_wall_usec.iter().enumerate() {
            let rounds = &r.rounds[i * case.k as usize..(i + 1) * case.k as usize];
            let mut span = 0;
            for (j, round) in rounds.iter().enumerate() {
                let slowest = *round.completion_usec.iter().max().unwrap();
                prop_assert_eq!(round.released_usec, slowest + case.latency);
                if j + 1 < rounds.len() {
                    prop_assert_eq!(rounds[j + 1].start_usec, round.released_usec);
                }
                span += slowest - round.start_usec;
            }
            prop_assert_eq!(*wall, span + case.k as u64 * case.latency);
        }
        // Uncontended and unthrottled: each chunk runs at a full core.
        if !case.hard_limits && case.capacity >= 1000 * case.cells.len() as u64 {
            let per_round: Vec<u64> = (0..case.k as usize)
                .map(|round| {
                    case.cells
                        .iter()
                        .map(|&c| chunks(c * 1000, case.k)[round].div_ceil(1000))
                        .max()
                        .unwrap()
                })
                .collect();
            let expected = per_round.iter().sum::<u64>() + case.k as u64 * case.latency;
            prop_assert_eq!(
                &r.per_iteration_wall_usec,
                &vec![expected; case.iterations as usize]
            );
        }
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok("1000 randomized scenarios: wall = sum of slowest-rank spans + K x latency".into())
}

fn phase_schedule() -> Outcome {
    let plan = |r: &[u64], mode| AllocationPlan::from_requests(r.to_vec(), None, mode).unwrap();
    let s = PhaseSchedule {
        t1_usec: 1_000_000,
        t2_usec: 3_000_000,
        alloc_max: plan(&[2000, 2000], AllocationMode::RequestsOnly),
        alloc_mid: plan(&[1000, 1000], AllocationMode::RequestsOnly),
        alloc_min: plan(&[500, 500], AllocationMode::RequestsOnly),
    };
    check(phase_allocation(0, &s) == &s.alloc_max, "t=0")?;
    check(
        phase_allocation(s.t1_usec - 1, &s) == &s.alloc_max,
        "t=t1-1",
    )?;
    check(phase_allocation(s.t1_usec, &s) == &s.alloc_mid, "t=t1")?;
    check(
        phase_allocation(s.t2_usec - 1, &s) == &s.alloc_mid,
        "t=t2-1",
    )?;
    check(phase_allocation(s.t2_usec, &s) == &s.alloc_min, "t=t2")?;

    // No restart: the dynamic run finishes every iteration with all work done.
    let c5 = bundled("c5_dynamic")
        .unwrap()
        .resolve()
        .map_err(|e| e.to_string())?;
    let outcome = c5.run_with_plan().map_err(|e| e.to_string())?;
    let r = &outcome.result;
    check(
        r.iterations_completed == c5.scenario.iterations,
        "dynamic run lost iterations",
    )?;
    check(outcome.fired.len() == 1, "patch did not fire")?;
    check(
        r.resizes.iter().all(|e| e.applied_at_usec.is_some()),
        "resize not applied",
    )?;
    for (i, x) in r.per_rank.iter().enumerate() {
        check(
            x.work_millicore_usec == c5.scenario.total_work()[i],
            format!(
                "rank {i} work {} of {}",
                x.work_millicore_usec,
                c5.scenario.total_work()[i]
            ),
        )?;
    }

    // Conflicts: exactly the targets whose new request exceeds their limit.
    let limits = [250u64, 500, 1000, 1000];
    let ranks = limits.iter().map(|&l| rank(20_000, hard(l), 4)).collect();
    let scenario = one_node(ranks, 4000, AllocationMode::HardLimits, 10);
    let new_requests = vec![300u64, 500, 1200, 900];
    let patch = PatchPlan {
        entries: vec![PatchEntry {
            trigger: Trigger::AtIteration(2),
            targets: vec![0, 1, 2, 3],
            new_requests_millicores: new_requests.clone(),
            new_limits_millicores: None,
        }],
    };
    let outcome = apply_plan_in_sim(&patch, &scenario, 5_000_000).map_err(|e| e.to_string())?;
    let conflicted: Vec<usize> = outcome
        .conflicts
        .iter()
        .map(|(_, e)| match e {
            SimError::ResizeConflict { rank, .. } => *rank,
            other => panic!("unexpected {other}"),
        })
        .collect();
    let expected: Vec<usize> = (0..4).filter(|&i| new_requests[i] > limits[i]).collect();
    check(
        conflicted == expected,
        format!("conflicts on {conflicted:?}, expected {expected:?}"),
    )?;
    let applied: Vec<usize> = outcome
        .result
        .resizes
        .iter()
        .filter(|e| e.failure.is_none())
        .map(|e| e.rank)
        .collect();
    check(applied == [1, 3], format!("patched {applied:?}"))?;
    check(
        outcome.result.iterations_completed == 10,
        "run stopped after a failed patch",
    )?;
    Ok(format!(
        "boundaries exact, no-restart holds, conflicts on ranks {conflicted:?} only"
    ))
}

fn metrics() -> Outcome {
    let constant = |m: u64, t: u64| {
        UsageSeries::new(
            vec![
                UsageSample {
                    time_usec: 0,
                    millicores: m,
                },
                UsageSample {
                    time_usec: t,
                    millicores: m,
                },
            ],
            0,
        )
        .unwrap()
    };
    let four: Vec<UsageSeries> = (0..4).map(|_| constant(1000, 35_000_000)).collect();
    let h = cpu_hours(&four, 35_000_000).map_err(|e| e.to_string())?;
    check(h == Ratio::from_integer(140), format!("H = {h}"))?;
    check(
        resource_efficiency(h, h).unwrap() == Ratio::from_integer(1),
        "eta(x,x) != 1",
    )?;

    let positive = (1u64..=1_000_000_000, 1u64..=1_000_000)
        .prop_map(|(n, d)| Exact::new(n as u128, d as u128));
    runner(1000)
        .run(&(positive.clone(), positive), |(a, b)| {
            let prod = resource_efficiency(a, b).unwrap() * resource_efficiency(b, a).unwrap();
            prop_assert_eq!(prod, Ratio::from_integer(1));
            Ok(())
        })
        .map_err(|e| format!("anti-symmetry: {e}"))?;

    let packing = (1usize..=5).prop_flat_map(|nodes| {
        (
            prop::collection::vec((1u64..=4000, 0..nodes), 1..=24),
            prop::collection::vec(0u64..=8000, nodes),
        )
    });
    runner(1000)
        .run(&packing, |(pods, slack)| {
            let requests: Vec<u64> = pods.iter().map(|p| p.0).collect();
            let node_of: Vec<usize> = pods.iter().map(|p| p.1).collect();
            let mut load = vec![0u64; slack.len()];
            for (r, &n) in requests.iter().zip(&node_of) {
                load[n] += r;
            }
            let nodes: Vec<NodeSpec> = load
                .iter()
                .zip(&slack)
                .map(|(l, s)| NodeSpec::new((l + s).max(1)))
                .collect();
            let plan =
                AllocationPlan::from_requests(requests.clone(), None, AllocationMode::RequestsOnly)
                    .unwrap();
            let report = packing_headroom(
                &nodes,
                &[Placement {
                    plan,
                    nodes: node_of,
                }],
            )
            .unwrap();
            prop_assert!(!report.over_committed);
            let capacity: u64 = nodes.iter().map(|n| n.capacity_millicores).sum();
            prop_assert_eq!(
                requests.iter().sum::<u64>() + report.total_free_millicores,
                capacity
            );
            Ok(())
        })
        .map_err(|e| format!("headroom conservation: {e}"))?;
    Ok("4 x 1000m x 35s = 140 core-s exactly; eta(x,x)=1; anti-symmetry and conservation over 1000 cases each".into())
}

fn round_trips() -> Outcome {
    let plans = (1usize..=16).prop_flat_map(|n| {
        (
            prop::collection::vec(1u64..=1000, n),
            n as u64..=64_000,
            any::<bool>(),
            prop::collection::vec("[a-z][a-z0-9-]{0,20}", n),
        )
    });
    runner(1000)
        .run(&plans, |(w, budget, hard_limits, names)| {
            let mode = if hard_limits {
                AllocationMode::HardLimits
            } else {
                AllocationMode::RequestsOnly
            };
            let plan = match allocate_cpu(&WeightVector::from_integers(&w).unwrap(), budget, mode) {
                Ok(p) => p,
                Err(_) => return Ok(()),
            };
            let text = emit_manifest(&plan, &names).unwrap();
            let (back, back_names) = parse_manifest(&text).unwrap();
            prop_assert_eq!(back, plan);
            prop_assert_eq!(back_names, names);
            Ok(())
        })
        .map_err(|e| format!("manifest: {e}"))?;

    let reports = (
        prop::collection::vec(1u64..=10_000_000, 1..=64),
        any::<bool>(),
    );
    runner(1000)
        .run(&reports, |(cells, header)| {
            let report = DecompositionReport::new(cells.clone());
            let (back, w) =
                ingest_decomposition_report(&emit_decomposition_report(&report, header)).unwrap();
            prop_assert_eq!(&back, &report);
            // Derived weights keep every pairwise ratio and are fully reduced.
            let ints = w.to_integers().unwrap();
            for i in 0..cells.len() {
                prop_assert_eq!(ints[i] * cells[0] as u128, ints[0] * cells[i] as u128);
            }
            let g = ints.iter().fold(0u128, |a, &b| num_integer::gcd(a, b));
            prop_assert_eq!(g, 1);
            Ok(())
        })
        .map_err(|e| format!("decomposition report: {e}"))?;
    Ok("manifest and decomposition-report round trips exact over 1000 cases each".into())
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("allocation exactness", allocation_exactness),
        ("cell apportionment", cell_apportionment),
        ("16-rank grouped plan", grouped_sixteen_rank_plan),
        ("quota formula", quota_formula),
        ("throttle oracle equivalence", throttle_oracle_equivalence),
        ("sustained-deficit fraction", sustained_deficit),
        ("requests-only zero throttle", requests_only_zero_throttle),
        (
            "synchronization amplification",
            synchronization_amplification,
        ),
        ("barrier coupling", barrier_coupling),
        ("phase schedule", phase_schedule),
        ("metrics", metrics),
        ("round trips", round_trips),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let ms = started.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("PASS {:>2}. {name} ({ms} ms): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2}. {name} ({ms} ms): {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
