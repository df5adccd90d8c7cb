//! Per-job feature vectors (schema v1).
//!
//! Features are a pure function of store content: recomputing them for the
//! same set of stored jobs always yields the same values, regardless of the
//! order in which the jobs arrived.

use std::collections::BTreeMap;

use chrono::{Datelike, Timelike};
use serde::{Deserialize, Serialize};

use crate::model::{BuildJob, JobStatus};
use crate::store::Snapshot;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_WINDOW: usize = 50;

pub const HOUR_OF_DAY: &str = "hour_of_day";
pub const DAY_OF_WEEK: &str = "day_of_week";
pub const QUEUED_DURATION: &str = "queued_duration";
pub const RECENT_FAILURE_RATE: &str = "recent_failure_rate";
pub const RECENT_MEAN_DURATION: &str = "recent_mean_duration";
pub const RERUN_INDEX: &str = "rerun_index";
pub const REF_IS_DEFAULT: &str = "ref_is_default";

/// (name, scale) in vector order. Learners divide each value by its scale.
const FIELDS: [(&str, f64); 7] = [
    (HOUR_OF_DAY, 24.0),
    (DAY_OF_WEEK, 7.0),
    (QUEUED_DURATION, 600.0),
    (RECENT_FAILURE_RATE, 1.0),
    (RECENT_MEAN_DURATION, 600.0),
    (RERUN_INDEX, 1.0),
    (REF_IS_DEFAULT, 1.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: u32,
    pub window: usize,
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn v1(window: usize) -> Self {
        FeatureSchema {
            version: SCHEMA_VERSION,
            window,
            features: FIELDS
                .iter()
                .map(|(n, s)| FeatureSpec {
                    name: n.to_string(),
                    scale: *s,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    /// Orders a named map into a vector; every schema feature must be present.
    pub fn vector(&self, values: &BTreeMap<String, f64>) -> Result<FeatureVector, SchemaMismatch> {
        let mut out = Vec::with_capacity(self.len());
        for f in &self.features {
            match values.get(&f.name) {
                Some(v) if v.is_finite() => out.push(*v),
                Some(_) => return Err(SchemaMismatch::NonFinite(f.name.clone())),
                None => return Err(SchemaMismatch::Missing(f.name.clone())),
            }
        }
        Ok(FeatureVector(out))
    }

    /// Values divided by their scales.
    pub fn scaled(&self, x: &FeatureVector) -> Result<Vec<f64>, SchemaMismatch> {
        if x.0.len() != self.len() {
            return Err(SchemaMismatch::Length {
                expected: self.len(),
                got: x.0.len(),
            });
        }
        Ok(x.0
            .iter()
            .zip(&self.features)
            .map(|(v, f)| v / f.scale)
            .collect())
    }
}

impl Default for FeatureSchema {
    fn default() -> Self {
        FeatureSchema::v1(DEFAULT_WINDOW)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchemaMismatch {
    #[error("missing feature {0}")]
    Missing(String),
    #[error("feature {0} is not finite")]
    NonFinite(String),
    #[error("expected {expected} features, got {got}")]
    Length { expected: usize, got: usize },
    #[error("unknown feature {0}")]
    Unknown(String),
}

/// Feature values in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Computes the v1 features of `job` against the jobs stored in `snap`.
pub fn compute(snap: &Snapshot, job: &BuildJob, window: usize) -> BTreeMap<String, f64> {
    let created = job.created_at;
    let queued = job
        .queued_duration
        .or_else(|| {
            job.started_at
                .map(|s| (s - created).num_milliseconds() as f64 / 1000.0)
        })
        .unwrap_or(0.0);
    let history = snap.preceding_in_group(job, window);
    let completed: Vec<&BuildJob> = history
        .iter()
        .copied()
        .filter(|j| j.status.is_completed())
        .collect();
    let failed = completed
        .iter()
        .filter(|j| j.status == JobStatus::Failed)
        .count();
    let failure_rate = (failed as f64 + 1.0) / (completed.len() as f64 + 2.0);
    let durations: Vec<f64> = completed.iter().filter_map(|j| j.duration).collect();
    let mean_duration = if durations.is_empty() {
        0.0
    } else {
        durations.iter().sum::<f64>() / durations.len() as f64
    };
    let rerun_index = snap
        .pipeline_jobs(job.project_id, job.pipeline_id)
        .filter(|j| j.name == job.name && (j.created_at, j.job_id) < (created, job.job_id))
        .count();
    let default_ref = snap
        .project(job.project_id)
        .map(|p| p.default_ref.as_str())
        .unwrap_or("main");
    BTreeMap::from([
        (HOUR_OF_DAY.to_string(), created.hour() as f64),
        (
            DAY_OF_WEEK.to_string(),
            created.weekday().num_days_from_monday() as f64,
        ),
        (QUEUED_DURATION.to_string(), queued),
        (RECENT_FAILURE_RATE.to_string(), failure_rate),
        (RECENT_MEAN_DURATION.to_string(), mean_duration),
        (RERUN_INDEX.to_string(), rerun_index as f64),
        (
            REF_IS_DEFAULT.to_string(),
            if job.git_ref == default_ref { 1.0 } else { 0.0 },
        ),
    ])
}

/// Jobs whose features may change when `job` changes: itself, every later
/// job of its (project, name) group whose trailing window reaches it, and its
/// later reruns.
pub fn dependents(snap: &Snapshot, job: &BuildJob, window: usize) -> Vec<u64> {
    let mut out = vec![job.job_id];
    let mut seen: Vec<chrono::DateTime<chrono::Utc>> = Vec::new();
    for j in snap.following_in_group(job) {
        if j.created_at > job.created_at {
            let closer = seen.partition_point(|t| *t < j.created_at);
            if closer >= window {
                break;
            }
            out.push(j.job_id);
        }
        seen.push(j.created_at);
    }
    out.extend(
        snap.pipeline_jobs(job.project_id, job.pipeline_id)
            .filter(|j| {
                j.name == job.name && (j.created_at, j.job_id) > (job.created_at, job.job_id)
            })
            .map(|j| j.job_id),
    );
    out.sort_unstable();
    out.dedup();
    out
}
