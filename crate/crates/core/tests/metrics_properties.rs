use proptest::prelude::*;
use rankshare::metrics::{cpu_hours, to_f64, UsageSeries};
use rankshare::sim::UsageSample;

fn series() -> impl Strategy<Value = Vec<UsageSample>> {
    prop::collection::vec((1u64..=50, 0u64..=4000), 1..=12).prop_map(|steps| {
        let mut t = 0;
        steps
            .into_iter()
            .map(|(dt, m)| {
                let s = UsageSample {
                    time_usec: t,
                    millicores: m,
                };
                t += dt;
                s
            })
            .collect()
    })
}

/// Midpoint sum over 1/64 us slices of the piecewise-linear interpolant.
fn dense_core_seconds(samples: &[UsageSample], horizon: u64) -> f64 {
    let value = |t: f64| -> f64 {
        match samples.iter().position(|s| s.time_usec as f64 > t) {
            None => samples.last().unwrap().millicores as f64,
            Some(0) => samples[0].millicores as f64,
            Some(j) => {
                let (a, b) = (samples[j - 1], samples[j]);
                let f = (t - a.time_usec as f64) / (b.time_usec - a.time_usec) as f64;
                a.millicores as f64 + f * (b.millicores as f64 - a.millicores as f64)
            }
        }
    };
    let start = samples[0].time_usec;
    let slices = (horizon - start) * 64;
    let h = 1.0 / 64.0;
    (0..slices)
        .map(|i| value(start as f64 + (i as f64 + 0.5) * h) * h)
        .sum::<f64>()
        / 1e9
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn trapezoid_matches_a_dense_sum(samples in series(), extra in 0u64..=30) {
        let horizon = samples.last().unwrap().time_usec + extra;
        let exact = to_f64(cpu_hours(&[UsageSeries::new(samples.clone(), 0).unwrap()], horizon).unwrap());
        let dense = dense_core_seconds(&samples, horizon);
        prop_assert!((exact - dense).abs() <= 1e-9, "{} vs {}", exact, dense);
    }

    #[test]
    fn cpu_time_adds_over_ranks(a in series(), b in series()) {
        let horizon = a.last().unwrap().time_usec.max(b.last().unwrap().time_usec);
        let sa = UsageSeries::new(a, 0).unwrap();
        let sb = UsageSeries::new(b, 1).unwrap();
        let both = cpu_hours(&[sa.clone(), sb.clone()], horizon).unwrap();
        prop_assert_eq!(both, cpu_hours(&[sa], horizon).unwrap() + cpu_hours(&[sb], horizon).unwrap());
    }
}
