//! Backfill a bounded history from the simulator and inspect what landed.
//!
//! cargo run --example backfill_simulator

use std::sync::Arc;

use cbdt::clock::ManualClock;
use cbdt::config::Config;
use cbdt::ingest::BackfillConfig;
use cbdt::ops;
use cbdt::store::JobQuery;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = Config::default();
    config.adapter.history_jobs = Some(250);
    config.adapter.simulator = Some(ops::default_simulation());
    let start = config.adapter.simulator.as_ref().unwrap().start;
    // Far enough ahead that every generated job has finished.
    let clock = Arc::new(ManualClock::new(start + chrono::Duration::days(30)));
    let (twin, _) = ops::twin_from_config(config, clock)?;

    let summary = twin.ingest.backfill(&BackfillConfig {
        max_jobs_per_project: Some(100),
        ..Default::default()
    })?;
    println!("{}", serde_json::to_string_pretty(&summary)?);

    let page = twin.store.query_jobs(&JobQuery {
        limit: 5,
        ..Default::default()
    })?;
    println!("{} jobs stored; oldest five:", page.total_count);
    for j in page.jobs {
        println!(
            "  #{:<4} p{} {:<8} {:<8} {}",
            j.job_id,
            j.project_id,
            j.name,
            j.status.as_str(),
            j.duration.map_or("-".into(), |d| format!("{d:.1}s"))
        );
    }
    Ok(())
}
