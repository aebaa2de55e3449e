//! Writers for simulation results.

use std::io::Write;

use super::SimResult;

pub const USAGE_HEADER: [&str; 3] = ["time_usec", "rank", "millicores"];
pub const THROTTLE_HEADER: [&str; 4] = ["rank", "nr_throttled", "throttled_usec", "fraction"];

/// Long-format usage timeline: one row per rank per sample.
pub fn write_usage_csv<W: Write>(result: &SimResult, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(USAGE_HEADER)?;
    for (rank, r) in result.per_rank.iter().enumerate() {
        for s in &r.cpu_usage_series {
            w.serialize((s.time_usec, rank, s.millicores))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-rank throttle counters; `fraction` is throttled time over wall time.
pub fn write_throttle_csv<W: Write>(result: &SimResult, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(THROTTLE_HEADER)?;
    for (rank, r) in result.per_rank.iter().enumerate() {
        w.serialize((
            rank,
            r.nr_throttled,
            r.throttled_usec,
            format!("{:.6}", r.throttled_fraction(result.wall_clock_usec)),
        ))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_result_json<W: Write>(result: &SimResult, out: W) -> serde_json::Result<()> {
    serde_json::to_writer_pretty(out, result)
}

pub fn read_result_json<R: std::io::Read>(input: R) -> serde_json::Result<SimResult> {
    serde_json::from_reader(input)
}
