//! Predictions turn into proposed actions; an operator approves one and it
//! is written back to the actual twin.
//!
//! cargo run --example improvement_loop

use cbdt::config::Config;
use cbdt::model::{ActionKind, ActionStatus};
use cbdt::ops;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut sim = ops::default_simulation();
    // Long builds on project 2 so the cache suggestion fires.
    sim.projects[1].duration_log_mean = 900f64.ln();
    let mut config = Config::default();
    config.adapter.simulator = Some(sim);
    config.adapter.horizon = "1d".into();
    config.improve.auto_approve.insert(ActionKind::RetryJob);

    let (twin, sim, clock) = ops::simulation(config)?;
    let summary = ops::run_simulation(&twin, &sim, &clock, None);
    println!("{} actions over {} jobs", summary.actions, summary.jobs);
    for status in [
        ActionStatus::Proposed,
        ActionStatus::Applied,
        ActionStatus::Failed,
    ] {
        println!("  {status:?}: {}", twin.improve.list(Some(status)).len());
    }

    let proposed = twin.improve.list(Some(ActionStatus::Proposed));
    if let Some(cache) = proposed.iter().find(|a| a.kind == ActionKind::EnableCache) {
        twin.improve.approve(cache.action_id)?;
        let done = twin.improve.apply(cache.action_id)?;
        println!(
            "applied {:?} on project {} -> {:?}; variable now {:?}",
            done.kind,
            done.target.project_id,
            done.response_id,
            sim.variable(
                done.target.project_id,
                &twin.improve.config().cache_variable
            )
        );
        let again = twin.improve.apply(cache.action_id)?;
        println!("second apply is a no-op: {}", again == done);
    }
    if let Some(advisory) = proposed.iter().find(|a| a.kind == ActionKind::OpenAdvisory) {
        let rejected = twin.improve.reject(advisory.action_id)?;
        println!(
            "rejected advisory {} ({:?})",
            rejected.action_id, rejected.status
        );
    }
    Ok(())
}
