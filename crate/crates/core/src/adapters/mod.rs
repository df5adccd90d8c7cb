//! Boundary to the actual twin: the CI platform whose builds are mirrored.
//!
//! Two implementations share the reader/writer contract: [`GitLabClient`]
//! talks to a GitLab-compatible REST API and [`Simulator`] generates a
//! seeded, ground-truth-known history in process. [`sim_http`] exposes the
//! simulator over the same REST shapes so the HTTP client can be exercised
//! against it.

pub mod dump;
mod gitlab;
pub mod sim;
pub mod sim_http;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use dump::DumpReader;
pub use gitlab::GitLabClient;
pub use sim::{RegimeChange, SimConfig, SimProject, Simulator, WebhookDelivery};

use crate::model::{Project, Timestamp};

/// A job record in the platform's own JSON shape (GitLab jobs API).
pub type RawJob = serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPage {
    pub records: Vec<RawJob>,
    pub next_page: Option<u32>,
}

pub const MAX_PER_PAGE: u32 = 100;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdapterError {
    #[error("actual twin unreachable: {0}")]
    Unreachable(String),
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("rejected by actual twin: {0}")]
    Rejected(String),
}

pub fn check_per_page(per_page: u32) -> Result<(), AdapterError> {
    if (1..=MAX_PER_PAGE).contains(&per_page) {
        Ok(())
    } else {
        Err(AdapterError::InvalidRequest(format!(
            "per_page must be in [1, {MAX_PER_PAGE}], got {per_page}"
        )))
    }
}

/// Read side of the actual twin.
pub trait ActualTwinReader: Send + Sync {
    fn list_projects(&self) -> Result<Vec<Project>, AdapterError>;

    /// One page (1-based) of jobs, newest first. With `updated_after`, only
    /// jobs whose latest status change is strictly later are returned.
    fn list_jobs(
        &self,
        project_id: u64,
        page: u32,
        per_page: u32,
        updated_after: Option<Timestamp>,
    ) -> Result<RawPage, AdapterError>;

    fn get_job(&self, project_id: u64, job_id: u64) -> Result<RawJob, AdapterError>;
}

/// Write side of the actual twin. Each call returns the platform's response id.
pub trait ActualTwinWriter: Send + Sync {
    fn set_ci_variable(
        &self,
        project_id: u64,
        key: &str,
        value: &str,
    ) -> Result<String, AdapterError>;
    fn retry_job(&self, project_id: u64, job_id: u64) -> Result<String, AdapterError>;
    fn upsert_file(
        &self,
        project_id: u64,
        path: &str,
        content: &str,
        message: &str,
    ) -> Result<String, AdapterError>;
}

/// Latest status-change timestamp of a raw record, if parseable.
pub fn raw_updated_at(raw: &RawJob) -> Option<Timestamp> {
    ["finished_at", "started_at", "created_at"]
        .iter()
        .filter_map(|k| raw.get(*k).and_then(|v| v.as_str()))
        .filter_map(|s| chrono::DateTime::parse_from_rfc3339(s).ok())
        .map(|t| t.with_timezone(&chrono::Utc))
        .max()
}
