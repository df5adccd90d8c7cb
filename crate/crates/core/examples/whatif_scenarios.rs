//! Ranking hypothetical changes by their effect on predicted failure.
//!
//! cargo run --example whatif_scenarios

use std::collections::BTreeMap;

use cbdt::config::Config;
use cbdt::model::{FeatureDelta, JobSampleSpec, Scenario, Scope, WhatIfMetric};
use cbdt::models::features;
use cbdt::ops;
use cbdt::whatif::Direction;

fn scenario(label: &str, deltas: &[(&str, FeatureDelta)]) -> Scenario {
    Scenario {
        scenario_id: String::new(),
        label: label.into(),
        feature_deltas: deltas
            .iter()
            .map(|(k, d)| (k.to_string(), *d))
            .collect::<BTreeMap<_, _>>(),
        job_sample_spec: JobSampleSpec {
            scope: Scope::All,
            trailing_jobs: 200,
        },
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = Config::default();
    config.adapter.horizon = "3d".into();
    let (twin, sim, clock) = ops::simulation(config)?;
    ops::run_simulation(&twin, &sim, &clock, None);

    let scenarios = vec![
        scenario("as is", &[]),
        scenario(
            "all on default branch",
            &[(features::REF_IS_DEFAULT, FeatureDelta::Set(1.0))],
        ),
        scenario(
            "queue +5 min",
            &[(features::QUEUED_DURATION, FeatureDelta::Add(300.0))],
        ),
        scenario(
            "healthy history",
            &[(features::RECENT_FAILURE_RATE, FeatureDelta::Set(0.0))],
        ),
    ];
    let ranked = twin.whatif.compare(
        &scenarios,
        WhatIfMetric::FailureProbability,
        Direction::Minimize,
    )?;
    for r in ranked {
        let m = &r.report.metrics[&WhatIfMetric::FailureProbability];
        println!(
            "{}. {:<24} p(fail) {:.4} -> {:.4} ({:+.4}) over {} jobs",
            r.rank,
            r.report.label,
            m.baseline_value,
            m.scenario_value,
            m.delta,
            r.report.sample_size
        );
    }

    let unknown = twin
        .whatif
        .evaluate(&scenario("typo", &[("cpu_count", FeatureDelta::Add(1.0))]));
    println!("unknown feature: {}", unknown.unwrap_err());
    Ok(())
}
