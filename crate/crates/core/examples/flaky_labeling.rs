//! Flaky labels: a failed job is flaky when a later attempt of the same job
//! in the same pipeline succeeded.
//!
//! cargo run --example flaky_labeling

use cbdt::config::Config;
use cbdt::ingest::{label_group, parse_timestamp};
use cbdt::model::JobStatus;
use cbdt::ops;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = |s: &str| parse_timestamp(s).unwrap();
    let group = [
        (1, JobStatus::Failed, t("2024-01-01T10:00:00Z")),
        (2, JobStatus::Failed, t("2024-01-01T10:05:00Z")),
        (3, JobStatus::Success, t("2024-01-01T10:10:00Z")),
    ];
    println!(
        "retry group fail, fail, success -> {:?}",
        label_group(&group)
    );
    let group = [
        (4, JobStatus::Success, t("2024-01-01T10:00:00Z")),
        (5, JobStatus::Failed, t("2024-01-01T10:05:00Z")),
    ];
    println!(
        "retry group success, fail       -> {:?}",
        label_group(&group)
    );

    // Against simulator ground truth.
    let mut config = Config::default();
    config.adapter.horizon = "2d".into();
    let (twin, sim, clock) = ops::simulation(config)?;
    clock.set(sim.end() + chrono::Duration::days(1));
    twin.ingest.backfill(&Default::default())?;
    let snap = twin.store.snapshot();
    let (mut failed, mut agree) = (0, 0);
    for truth in sim
        .jobs()
        .iter()
        .filter(|j| j.final_status == JobStatus::Failed)
    {
        failed += 1;
        agree += (snap.job(truth.job_id).and_then(|j| j.flaky) == Some(truth.flaky)) as usize;
    }
    println!("{agree}/{failed} failed jobs labelled as in the ground truth");
    Ok(())
}
