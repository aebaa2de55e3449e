//! Closed-form per-period walk of one cgroup with constant demand.
//!
//! Used to cross-check the event-driven engine: it shares no code with it.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodWalk {
    /// CPU time actually received, in microseconds.
    pub run_usec: u64,
    pub throttled_usec: u64,
    pub nr_throttled: u64,
}

/// Walks `horizon_usec / period_usec` periods. A rank demanding
/// `demand_millicores` consumes `demand/1000` CPU-µs per wall-µs from the
/// start of each period; once `quota_usec` is used it sits throttled until
/// the period ends.
///
/// Panics if the horizon is not a whole number of periods.
pub fn step_period_oracle(
    quota_usec: u64,
    period_usec: u64,
    demand_millicores: u64,
    horizon_usec: u64,
) -> PeriodWalk {
    assert!(period_usec > 0, "period must be positive");
    assert_eq!(
        horizon_usec % period_usec,
        0,
        "horizon must be a multiple of the period"
    );

    let periods = horizon_usec / period_usec;
    let budget = quota_usec as u128 * 1000;
    let need = demand_millicores as u128 * period_usec as u128;

    let mut run_milli: u128 = 0;
    let mut walk = PeriodWalk {
        run_usec: 0,
        throttled_usec: 0,
        nr_throttled: 0,
    };
    for _ in 0..periods {
        if need <= budget {
            run_milli += need;
        } else {
            run_milli += budget;
            // Running dry on the last microsecond is not a throttle.
            let exhausted_at = budget.div_ceil(demand_millicores as u128) as u64;
            if exhausted_at < period_usec {
                walk.throttled_usec += period_usec - exhausted_at;
                walk.nr_throttled += 1;
            }
        }
    }
    walk.run_usec = (run_milli / 1000) as u64;
    walk
}
