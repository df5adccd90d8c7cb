//! Online models learning from a simulated stream, then scoring a
//! hand-made feature vector.
//!
//! cargo run --example online_models

use std::collections::BTreeMap;

use cbdt::config::Config;
use cbdt::model::ModelKind;
use cbdt::models::features;
use cbdt::ops;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = Config::default();
    config.adapter.horizon = "2d".into();
    let (twin, sim, clock) = ops::simulation(config)?;
    let summary = ops::run_simulation(&twin, &sim, &clock, None);
    println!(
        "{} predictions written, models at {}",
        summary.predictions, summary.models_id
    );

    let set = twin.models.current();
    for s in set.snapshots() {
        println!(
            "  {:<28} trained on {}",
            s.model_snapshot_id, s.trained_on_count
        );
    }

    let values = BTreeMap::from([
        (features::HOUR_OF_DAY.to_string(), 14.0),
        (features::DAY_OF_WEEK.to_string(), 2.0),
        (features::QUEUED_DURATION.to_string(), 30.0),
        (features::RECENT_FAILURE_RATE.to_string(), 0.6),
        (features::RECENT_MEAN_DURATION.to_string(), 320.0),
        (features::RERUN_INDEX.to_string(), 0.0),
        (features::REF_IS_DEFAULT.to_string(), 1.0),
    ]);
    let x = set.schema.vector(&values)?;
    for kind in [ModelKind::Failure, ModelKind::Flaky, ModelKind::Duration] {
        let p = set.predict(kind, 1, &x)?;
        println!("{:<8} {:>9.3}  ({})", kind.as_str(), p.value, p.snapshot_id);
    }
    println!("why it might fail:");
    for (name, w) in set
        .attributions(ModelKind::Failure, 1, &x)
        .into_iter()
        .take(3)
    {
        println!("  {name:<22} {w:+.3}");
    }
    Ok(())
}
