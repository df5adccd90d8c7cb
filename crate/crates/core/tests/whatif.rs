mod common;

use std::collections::BTreeMap;

use cbdt::model::{
    BuildJob, FeatureDelta, JobSampleSpec, JobStatus, ModelKind, Scenario, Scope, WhatIfMetric,
};
use cbdt::models::features::{self, FeatureVector};
use cbdt::models::{ModelSet, ModelsConfig};
use cbdt::store::Store;
use cbdt::whatif::{evaluate_on, rank, Direction, WhatIfError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{job, t0};

fn features_with(failure_rate: f64) -> BTreeMap<String, f64> {
    let schema = features::FeatureSchema::default();
    schema
        .names()
        .map(|n| {
            let v = match n {
                features::RECENT_FAILURE_RATE => failure_rate,
                features::RECENT_MEAN_DURATION => 300.0,
                features::REF_IS_DEFAULT => 1.0,
                features::HOUR_OF_DAY => 10.0,
                _ => 0.0,
            };
            (n.to_string(), v)
        })
        .collect()
}

fn vector(failure_rate: f64) -> FeatureVector {
    features::FeatureSchema::default()
        .vector(&features_with(failure_rate))
        .unwrap()
}

/// A failure learner trained on labels drawn with p = recent_failure_rate.
fn trained(seed: u64, n: usize) -> ModelSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ModelSet::new(&ModelsConfig::default());
    for _ in 0..n {
        let rate: f64 = rng.gen();
        let y = rng.gen_bool(rate) as u8 as f64;
        set.update(ModelKind::Failure, 1, &vector(rate), y, t0())
            .unwrap();
        set.update(
            ModelKind::Duration,
            1,
            &vector(rate),
            rng.gen_range(100.0..500.0),
            t0(),
        )
        .unwrap();
    }
    set
}

fn sample_store(rate: f64, n: u64) -> Store {
    let store = Store::in_memory();
    let jobs: Vec<BuildJob> = (1..=n)
        .map(|i| {
            let mut j = job(i, i, "build", JobStatus::Success, i as i64);
            j.features = features_with(rate);
            j
        })
        .collect();
    store.upsert_jobs(jobs).unwrap();
    store
}

fn scenario(label: &str, deltas: &[(&str, FeatureDelta)]) -> Scenario {
    Scenario {
        scenario_id: label.into(),
        label: label.into(),
        feature_deltas: deltas.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        job_sample_spec: JobSampleSpec {
            scope: Scope::All,
            trailing_jobs: 50,
        },
    }
}

fn failure_delta(r: &cbdt::model::SensitivityReport) -> f64 {
    r.metrics[&WhatIfMetric::FailureProbability].delta
}

#[test]
fn lowering_recent_failures_lowers_predicted_failure() {
    let set = trained(7, 5000);
    let weight = set.failure["project-1"].weights
        [set.schema.index_of(features::RECENT_FAILURE_RATE).unwrap()];
    assert!(
        weight > 0.0,
        "controlled training learns a positive weight, got {weight}"
    );

    let store = sample_store(0.6, 20);
    let report = evaluate_on(
        &set,
        &store.snapshot(),
        &scenario(
            "calm",
            &[(features::RECENT_FAILURE_RATE, FeatureDelta::Set(0.0))],
        ),
    )
    .unwrap();
    assert!(failure_delta(&report) < 0.0);
    assert_eq!(report.sample_size, 20);
    assert_eq!(report.metrics[&WhatIfMetric::ExpectedDuration].delta, 0.0);
    assert_eq!(report.model_snapshot_id, set.id());
}

#[test]
fn evaluation_is_deterministic_and_pure() {
    let set = trained(3, 500);
    let before = set.clone();
    let store = sample_store(0.4, 30);
    let s = scenario(
        "more",
        &[(features::RECENT_FAILURE_RATE, FeatureDelta::Add(0.3))],
    );
    let a = evaluate_on(&set, &store.snapshot(), &s).unwrap();
    let b = evaluate_on(&set, &store.snapshot(), &s).unwrap();
    assert_eq!(a, b);
    assert_eq!(set, before);
    assert!(failure_delta(&a) > 0.0);
}

#[test]
fn ranking_follows_the_chosen_direction() {
    let set = trained(11, 5000);
    let store = sample_store(0.6, 20);
    let snap = store.snapshot();
    let run = |s: &Scenario| evaluate_on(&set, &snap, s).unwrap();
    let half = run(&scenario(
        "half",
        &[(features::RECENT_FAILURE_RATE, FeatureDelta::Set(0.3))],
    ));
    let zero = run(&scenario(
        "zero",
        &[(features::RECENT_FAILURE_RATE, FeatureDelta::Set(0.0))],
    ));
    let ranked = rank(
        vec![half.clone(), zero.clone()],
        WhatIfMetric::FailureProbability,
        Direction::Minimize,
    );
    assert_eq!(
        (ranked[0].report.label.as_str(), ranked[0].rank),
        ("zero", 1)
    );
    let ranked = rank(
        vec![half, zero],
        WhatIfMetric::FailureProbability,
        Direction::Maximize,
    );
    assert_eq!(ranked[0].report.label, "half");

    let single = rank(
        vec![run(&scenario("only", &[]))],
        WhatIfMetric::FailureProbability,
        Direction::Minimize,
    );
    assert_eq!(single[0].rank, 1);
}

#[test]
fn bad_scenarios() {
    let set = trained(1, 10);
    let store = sample_store(0.1, 3);
    let unknown = evaluate_on(
        &set,
        &store.snapshot(),
        &scenario("x", &[("colour", FeatureDelta::Add(1.0))]),
    );
    assert_eq!(unknown, Err(WhatIfError::UnknownFeature("colour".into())));
    let mut elsewhere = scenario("x", &[]);
    elsewhere.job_sample_spec.scope = Scope::Projects(vec![99]);
    assert_eq!(
        evaluate_on(&set, &store.snapshot(), &elsewhere),
        Err(WhatIfError::EmptySample)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_delta_is_exactly_zero(seed in any::<u64>(), n in 0usize..300, rate in 0.0f64..1.0) {
        let set = trained(seed, n);
        let store = sample_store(rate, 10);
        let report = evaluate_on(&set, &store.snapshot(), &scenario("id", &[])).unwrap();
        for e in report.metrics.values() {
            prop_assert_eq!(e.delta, 0.0);
            prop_assert_eq!(e.baseline_value, e.scenario_value);
        }
        let add0 = evaluate_on(&set, &store.snapshot(), &scenario("id", &[(features::QUEUED_DURATION, FeatureDelta::Add(0.0))])).unwrap();
        prop_assert_eq!(add0.metrics, report.metrics);
    }
}
