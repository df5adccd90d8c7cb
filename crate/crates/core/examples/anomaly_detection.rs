//! A build that suddenly takes three times longer is flagged against the
//! learned duration distribution.
//!
//! cargo run --example anomaly_detection

use cbdt::adapters::{RegimeChange, SimProject};
use cbdt::config::Config;
use cbdt::ops;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut sim = ops::default_simulation();
    let mut project = SimProject::new(1, 12.0);
    project.job_names = vec!["build".into()];
    project.duration_log_sigma = 0.2;
    sim.projects = vec![project];
    let shift = sim.start + chrono::Duration::days(2);
    sim.regime_changes = vec![RegimeChange {
        project_id: 1,
        at: shift,
        duration_factor: 3.0,
        job_name: None,
    }];
    let mut config = Config::default();
    config.adapter.simulator = Some(sim);
    config.adapter.horizon = "54h".into();

    let (twin, sim, clock) = ops::simulation(config)?;
    ops::run_simulation(&twin, &sim, &clock, None);

    let snap = twin.store.snapshot();
    let flagged = twin.models.anomalies(None, None);
    let before = flagged
        .iter()
        .filter(|p| snap.job(p.job_id).is_some_and(|j| j.created_at < shift))
        .count();
    println!(
        "{} anomalies, {before} before the shift; first after it:",
        flagged.len()
    );
    let after = flagged
        .iter()
        .filter(|p| snap.job(p.job_id).is_some_and(|j| j.created_at >= shift));
    for p in after.take(5) {
        let job = snap.job(p.job_id).unwrap();
        println!(
            "  job {:<5} took {:>7.1}s, expected {:>6.1}s (z = {:.1})",
            job.job_id,
            p.actual_value.unwrap_or_default(),
            p.predicted_value,
            p.anomaly_score.unwrap_or_default()
        );
    }
    Ok(())
}
