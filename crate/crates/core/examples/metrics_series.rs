//! Metric series at two granularities, and daily counts equal to the sum of
//! their hours.
//!
//! cargo run --example metrics_series

use cbdt::config::Config;
use cbdt::model::{Interval, Scope};
use cbdt::ops;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = Config::default();
    config.adapter.horizon = "3d".into();
    let (twin, sim, clock) = ops::simulation(config)?;
    clock.set(sim.end() + chrono::Duration::days(1));
    twin.ingest.backfill(&Default::default())?;

    let (from, to) = (sim.start(), sim.start() + chrono::Duration::days(3));
    let daily = twin
        .metrics
        .series(&Scope::All, Interval::Daily, from, to)?;
    let hourly = twin
        .metrics
        .series(&Scope::All, Interval::Hourly, from, to)?;
    println!(
        "{:<26} {:>6} {:>10} {:>8} {:>8}",
        "day", "runs", "mean s", "fail", "flaky"
    );
    for d in daily.iter() {
        let hours: u64 = hourly
            .iter()
            .filter(|h| h.window_start >= d.window_start && h.window_start < d.window_end)
            .map(|h| h.executions_frequency)
            .sum();
        assert_eq!(hours, d.executions_frequency);
        println!(
            "{:<26} {:>6} {:>10.1} {:>8.3} {:>8.3}",
            d.window_start.to_rfc3339(),
            d.executions_frequency,
            d.mean_duration.unwrap_or(f64::NAN),
            d.failure_ratio.unwrap_or(f64::NAN),
            d.flaky_failure_ratio.unwrap_or(f64::NAN),
        );
    }

    let one = Scope::Projects(vec![1]);
    let p1 = twin.metrics.series(&one, Interval::Daily, from, to)?;
    println!(
        "project 1 runs per day: {:?}",
        p1.iter()
            .map(|s| s.executions_frequency)
            .collect::<Vec<_>>()
    );
    Ok(())
}
