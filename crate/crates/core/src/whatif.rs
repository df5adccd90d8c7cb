//! Scenario evaluation against a frozen copy of the models.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::model::{
    BuildJob, ModelKind, Scenario, SensitivityEntry, SensitivityReport, WhatIfMetric,
};
use crate::models::features::FeatureVector;
use crate::models::{ModelService, ModelSet};
use crate::store::{Snapshot, Store};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WhatIfError {
    #[error("no terminal jobs with features in scope")]
    EmptySample,
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedReport {
    pub rank: usize,
    pub report: SensitivityReport,
}

fn metric_kind(m: WhatIfMetric) -> ModelKind {
    match m {
        WhatIfMetric::FailureProbability => ModelKind::Failure,
        WhatIfMetric::FlakyProbability => ModelKind::Flaky,
        WhatIfMetric::ExpectedDuration => ModelKind::Duration,
    }
}

const METRICS: [WhatIfMetric; 3] = [
    WhatIfMetric::FailureProbability,
    WhatIfMetric::FlakyProbability,
    WhatIfMetric::ExpectedDuration,
];

/// The most recent `n` terminal jobs in scope, newest first.
pub fn sample<'a>(snap: &'a Snapshot, scenario: &Scenario) -> Vec<&'a BuildJob> {
    let spec = &scenario.job_sample_spec;
    let mut jobs: Vec<&BuildJob> = snap
        .jobs()
        .filter(|j| j.status.is_terminal() && spec.scope.contains(j.project_id))
        .collect();
    jobs.sort_by(|a, b| {
        let key = |j: &BuildJob| (j.finished_at.unwrap_or(j.created_at), j.job_id);
        key(b).cmp(&key(a))
    });
    jobs.truncate(spec.trailing_jobs);
    jobs
}

/// Evaluates `scenario` on `models` over jobs from `snap`. Pure.
pub fn evaluate_on(
    models: &ModelSet,
    snap: &Snapshot,
    scenario: &Scenario,
) -> Result<SensitivityReport, WhatIfError> {
    let schema = &models.schema;
    let mut deltas = Vec::with_capacity(scenario.feature_deltas.len());
    for (name, delta) in &scenario.feature_deltas {
        let i = schema
            .index_of(name)
            .ok_or_else(|| WhatIfError::UnknownFeature(name.clone()))?;
        deltas.push((i, *delta));
    }
    let rows: Vec<(u64, FeatureVector, FeatureVector)> = sample(snap, scenario)
        .into_iter()
        .filter_map(|j| {
            let x = schema.vector(&j.features).ok()?;
            let mut y = x.clone();
            for (i, d) in &deltas {
                y.0[*i] = d.apply(y.0[*i]);
            }
            Some((j.project_id, x, y))
        })
        .collect();
    if rows.is_empty() {
        return Err(WhatIfError::EmptySample);
    }
    let n = rows.len() as f64;
    let mut metrics = std::collections::BTreeMap::new();
    for m in METRICS {
        let kind = metric_kind(m);
        let (mut base, mut scen) = (0.0, 0.0);
        for (project, x, y) in &rows {
            base += models.predict(kind, *project, x).map_or(0.0, |p| p.value);
            scen += models.predict(kind, *project, y).map_or(0.0, |p| p.value);
        }
        metrics.insert(m, SensitivityEntry::new(base / n, scen / n));
    }
    Ok(SensitivityReport {
        scenario_id: scenario.scenario_id.clone(),
        label: scenario.label.clone(),
        model_snapshot_id: models.id(),
        metrics,
        sample_size: rows.len(),
    })
}

/// Orders reports by the delta of `metric`, best first; ties by label.
pub fn rank(
    mut reports: Vec<SensitivityReport>,
    metric: WhatIfMetric,
    direction: Direction,
) -> Vec<RankedReport> {
    let delta = |r: &SensitivityReport| r.metrics.get(&metric).map_or(0.0, |e| e.delta);
    reports.sort_by(|a, b| {
        let ord = delta(a).total_cmp(&delta(b));
        let ord = if direction == Direction::Maximize {
            ord.reverse()
        } else {
            ord
        };
        match ord {
            Ordering::Equal => a.label.cmp(&b.label),
            o => o,
        }
    });
    reports
        .into_iter()
        .enumerate()
        .map(|(i, report)| RankedReport {
            rank: i + 1,
            report,
        })
        .collect()
}

#[derive(Debug)]
pub struct WhatIfService {
    store: Arc<Store>,
    models: Arc<ModelService>,
}

impl WhatIfService {
    pub fn new(store: Arc<Store>, models: Arc<ModelService>) -> Self {
        WhatIfService { store, models }
    }

    pub fn evaluate(&self, scenario: &Scenario) -> Result<SensitivityReport, WhatIfError> {
        evaluate_on(&self.models.current(), &self.store.snapshot(), scenario)
    }

    /// Evaluates every scenario against one model set and ranks them.
    pub fn compare(
        &self,
        scenarios: &[Scenario],
        metric: WhatIfMetric,
        direction: Direction,
    ) -> Result<Vec<RankedReport>, WhatIfError> {
        let models = self.models.current();
        let snap = self.store.snapshot();
        let reports = scenarios
            .iter()
            .map(|s| evaluate_on(&models, &snap, s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(rank(reports, metric, direction))
    }
}
