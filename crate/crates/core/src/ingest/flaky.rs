//! Rerun-based flaky labeling.
//!
//! Within a retry group (project, pipeline, job name), a failed job is flaky
//! when a successful job of the same group was created after it. Canceled
//! and other non-completed jobs neither count as a later success nor receive
//! a label.

use std::collections::BTreeMap;

use crate::model::{JobStatus, Timestamp};
use crate::store::{DerivedUpdate, Snapshot, Store, StoreError};

/// Labels for one retry group given (job_id, status, created_at) triples.
/// Failed jobs get `Some(bool)`; every other job gets `None`.
pub fn label_group(jobs: &[(u64, JobStatus, Timestamp)]) -> Vec<(u64, Option<bool>)> {
    let last_success = jobs
        .iter()
        .filter(|(_, s, _)| *s == JobStatus::Success)
        .map(|(_, _, t)| *t)
        .max();
    jobs.iter()
        .map(|(id, status, created)| {
            let label =
                (*status == JobStatus::Failed).then(|| last_success.is_some_and(|t| t > *created));
            (*id, label)
        })
        .collect()
}

/// Label changes needed for one pipeline, as (job_id, new label).
pub fn pipeline_changes(
    snap: &Snapshot,
    project_id: u64,
    pipeline_id: u64,
) -> Vec<(u64, Option<bool>)> {
    let mut groups: BTreeMap<&str, Vec<(u64, JobStatus, Timestamp)>> = BTreeMap::new();
    let mut current: BTreeMap<u64, Option<bool>> = BTreeMap::new();
    for j in snap.pipeline_jobs(project_id, pipeline_id) {
        groups
            .entry(j.name.as_str())
            .or_default()
            .push((j.job_id, j.status, j.created_at));
        current.insert(j.job_id, j.flaky);
    }
    groups
        .values()
        .flat_map(|g| label_group(g))
        .filter(|(id, label)| current.get(id) != Some(label))
        .collect()
}

/// Recomputes flaky labels of one pipeline and returns the job ids whose
/// label changed.
pub fn postprocess_flaky(
    store: &Store,
    project_id: u64,
    pipeline_id: u64,
) -> Result<Vec<u64>, StoreError> {
    let changes = pipeline_changes(&store.snapshot(), project_id, pipeline_id);
    let ids = changes.iter().map(|(id, _)| *id).collect();
    store.set_derived(
        changes
            .into_iter()
            .map(|(job_id, flaky)| DerivedUpdate {
                job_id,
                flaky: Some(flaky),
                features: None,
            })
            .collect(),
    )?;
    Ok(ids)
}
