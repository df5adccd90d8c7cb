//! A day of two simulated projects played through the twin at 100 000x
//! speed, then the same history checked against the simulator's truth.
//!
//! cargo run --example simulate

use cbdt::config::Config;
use cbdt::model::JobStatus;
use cbdt::ops;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (twin, sim, clock) = ops::simulation(Config::default())?;
    let started = std::time::Instant::now();
    let summary = ops::run_simulation(&twin, &sim, &clock, Some(100_000.0));
    println!("{}", serde_json::to_string_pretty(&summary)?);
    println!("took {:.2?} of wall time", started.elapsed());

    let truth = sim.jobs();
    let snap = twin.store.snapshot();
    let mismatched = truth
        .iter()
        .filter(|t| snap.job(t.job_id).map(|j| j.status) != Some(t.final_status))
        .count();
    let failed = truth
        .iter()
        .filter(|t| t.final_status == JobStatus::Failed)
        .count();
    println!(
        "{} simulated jobs, {failed} failed, {mismatched} stored with a different status",
        truth.len()
    );
    Ok(())
}
