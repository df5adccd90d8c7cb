//! A read-only actual twin backed by an exported job dump.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde_json::{json, Value};

use super::{check_per_page, ActualTwinReader, AdapterError, RawJob, RawPage};
use crate::model::{ts, BuildJob, Project, Timestamp};

/// Serves canonical job records in the platform's JSON shape.
#[derive(Debug, Clone, Default)]
pub struct DumpReader {
    jobs: BTreeMap<u64, BuildJob>,
    projects: BTreeMap<u64, Project>,
}

/// Platform-shaped record of `job`.
pub fn raw_job(job: &BuildJob) -> RawJob {
    let t = |v: &Option<Timestamp>| v.as_ref().map(ts::format);
    json!({
        "id": job.job_id,
        "name": job.name,
        "status": job.status.as_str(),
        "ref": job.git_ref,
        "created_at": ts::format(&job.created_at),
        "started_at": t(&job.started_at),
        "finished_at": t(&job.finished_at),
        "duration": job.duration,
        "queued_duration": job.queued_duration,
        "pipeline": { "id": job.pipeline_id, "project_id": job.project_id, "sha": job.commit_sha },
        "runner": job.runner_id.map(|id| json!({ "id": id })),
    })
}

/// Job event announcing the final state of `job`.
pub fn webhook_body(job: &BuildJob) -> Value {
    json!({
        "object_kind": "build",
        "build_id": job.job_id,
        "build_name": job.name,
        "build_status": job.status.as_str(),
        "project_id": job.project_id,
        "pipeline_id": job.pipeline_id,
        "ref": job.git_ref,
    })
}

impl DumpReader {
    pub fn new(jobs: impl IntoIterator<Item = BuildJob>) -> Self {
        let jobs: BTreeMap<u64, BuildJob> = jobs.into_iter().map(|j| (j.job_id, j)).collect();
        let projects = jobs
            .values()
            .map(|j| {
                (
                    j.project_id,
                    Project {
                        project_id: j.project_id,
                        path: format!("project-{}", j.project_id),
                        default_ref: "main".into(),
                    },
                )
            })
            .collect();
        DumpReader { jobs, projects }
    }

    /// Reads one canonical job per line.
    pub fn from_ndjson(input: impl BufRead) -> std::io::Result<Self> {
        let mut jobs = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let job: BuildJob = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("line {}: {e}", n + 1),
                )
            })?;
            jobs.push(job);
        }
        Ok(DumpReader::new(jobs))
    }

    /// Overrides the project list, e.g. to carry default branches.
    pub fn with_projects(mut self, projects: impl IntoIterator<Item = Project>) -> Self {
        for p in projects {
            self.projects.insert(p.project_id, p);
        }
        self
    }

    pub fn jobs(&self) -> impl Iterator<Item = &BuildJob> {
        self.jobs.values()
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }
}

impl ActualTwinReader for DumpReader {
    fn list_projects(&self) -> Result<Vec<Project>, AdapterError> {
        Ok(self.projects.values().cloned().collect())
    }

    fn list_jobs(
        &self,
        project_id: u64,
        page: u32,
        per_page: u32,
        updated_after: Option<Timestamp>,
    ) -> Result<RawPage, AdapterError> {
        check_per_page(per_page)?;
        if page == 0 {
            return Err(AdapterError::InvalidRequest("page is 1-based".into()));
        }
        if !self.projects.contains_key(&project_id) {
            return Err(AdapterError::NotFound(format!("project {project_id}")));
        }
        let mut visible: Vec<&BuildJob> = self
            .jobs
            .values()
            .filter(|j| j.project_id == project_id)
            .filter(|j| updated_after.is_none_or(|a| j.updated_at() > a))
            .collect();
        visible.sort_by(|a, b| (b.created_at, b.job_id).cmp(&(a.created_at, a.job_id)));
        let start = (page as usize - 1) * per_page as usize;
        let records: Vec<RawJob> = visible
            .iter()
            .skip(start)
            .take(per_page as usize)
            .map(|j| raw_job(j))
            .collect();
        let next_page = (start + (per_page as usize) < visible.len()).then_some(page + 1);
        Ok(RawPage { records, next_page })
    }

    fn get_job(&self, project_id: u64, job_id: u64) -> Result<RawJob, AdapterError> {
        self.jobs
            .get(&job_id)
            .filter(|j| j.project_id == project_id)
            .map(raw_job)
            .ok_or_else(|| AdapterError::NotFound(format!("job {job_id}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::preprocess;
    use crate::model::JobStatus;

    #[test]
    fn raw_shape_round_trips_through_preprocess() {
        let t = crate::ingest::parse_timestamp("2024-03-01T10:00:00.250Z").unwrap();
        let job = BuildJob {
            job_id: 9,
            project_id: 2,
            pipeline_id: 5,
            name: "test".into(),
            git_ref: "dev".into(),
            commit_sha: "beef".into(),
            status: JobStatus::Failed,
            created_at: t,
            started_at: Some(t + chrono::Duration::seconds(3)),
            finished_at: Some(t + chrono::Duration::seconds(63)),
            queued_duration: Some(3.0),
            duration: Some(60.0),
            runner_id: Some(1),
            flaky: None,
            features: BTreeMap::new(),
        };
        let back = preprocess(&raw_job(&job), None).unwrap();
        assert_eq!(back, job);
        let r = DumpReader::new([job]);
        assert_eq!(r.list_jobs(2, 1, 10, None).unwrap().records.len(), 1);
        assert!(r.list_jobs(2, 2, 10, None).unwrap().records.is_empty());
        assert!(matches!(r.get_job(3, 9), Err(AdapterError::NotFound(_))));
    }
}
