//! Job events arriving through the webhook path, including a duplicate and
//! one with a bad token.
//!
//! cargo run --example webhook_ingest

use cbdt::config::Config;
use cbdt::ops;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (twin, sim, clock) = ops::simulation(Config::default())?;
    let deliveries = sim.deliveries();

    for d in deliveries.iter().take(30) {
        clock.set(d.at);
        twin.ingest
            .handle_webhook(Some(d.token.as_bytes()), d.body.as_bytes())?;
        twin.pump();
    }
    let first = &deliveries[0];
    println!(
        "job {} after 30 events: {:?}",
        first.job_id,
        twin.store.get_job(first.job_id).map(|j| j.status)
    );

    let export = |twin: &cbdt::twin::Twin| {
        let mut buf = Vec::new();
        twin.store.export_jobs(&mut buf).map(|_| buf)
    };
    let (before, predictions) = (export(&twin)?, twin.store.snapshot().predictions().count());
    twin.ingest
        .handle_webhook(Some(first.token.as_bytes()), first.body.as_bytes())?;
    twin.pump();
    println!(
        "duplicate delivery changed jobs: {}, predictions: {}",
        export(&twin)? != before,
        twin.store.snapshot().predictions().count() != predictions
    );

    let bad = twin
        .ingest
        .handle_webhook(Some(b"guess"), first.body.as_bytes());
    println!("wrong token: {}", bad.unwrap_err());

    for p in twin.store.snapshot().predictions_for_job(first.job_id) {
        println!(
            "  {:<8} predicted {:>8.3} by {} at {}",
            p.model_kind.as_str(),
            p.predicted_value,
            p.model_snapshot_id,
            p.predicted_at
        );
    }
    Ok(())
}
