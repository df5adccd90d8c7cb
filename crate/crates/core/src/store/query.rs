use serde::{Deserialize, Serialize};

use crate::model::{ts, BuildJob, JobStatus, Timestamp};

pub const DEFAULT_LIMIT: usize = 100;
pub const MAX_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortOrder {
    #[default]
    Asc,
    Desc,
}

/// Search over stored jobs. All ranges are half-open `[from, to)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project_ids: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statuses: Option<Vec<JobStatus>>,
    #[serde(rename = "ref", default, skip_serializing_if = "Option::is_none")]
    pub git_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flaky: Option<bool>,
    #[serde(with = "ts::option", default, skip_serializing_if = "Option::is_none")]
    pub created_from: Option<Timestamp>,
    #[serde(with = "ts::option", default, skip_serializing_if = "Option::is_none")]
    pub created_to: Option<Timestamp>,
    #[serde(with = "ts::option", default, skip_serializing_if = "Option::is_none")]
    pub finished_from: Option<Timestamp>,
    #[serde(with = "ts::option", default, skip_serializing_if = "Option::is_none")]
    pub finished_to: Option<Timestamp>,
    #[serde(default)]
    pub offset: usize,
    #[serde(default = "default_limit")]
    pub limit: usize,
    #[serde(default)]
    pub sort: SortOrder,
}

fn default_limit() -> usize {
    DEFAULT_LIMIT
}

impl Default for JobQuery {
    fn default() -> Self {
        JobQuery {
            project_ids: None,
            statuses: None,
            git_ref: None,
            name: None,
            flaky: None,
            created_from: None,
            created_to: None,
            finished_from: None,
            finished_to: None,
            offset: 0,
            limit: DEFAULT_LIMIT,
            sort: SortOrder::Asc,
        }
    }
}

impl JobQuery {
    pub fn validate(&self) -> Result<(), String> {
        if self.limit == 0 || self.limit > MAX_LIMIT {
            return Err(format!("limit must be in [1, {MAX_LIMIT}]"));
        }
        if let (Some(from), Some(to)) = (self.created_from, self.created_to) {
            if from > to {
                return Err("created_at range is inverted".into());
            }
        }
        if let (Some(from), Some(to)) = (self.finished_from, self.finished_to) {
            if from > to {
                return Err("finished_at range is inverted".into());
            }
        }
        Ok(())
    }

    pub fn matches(&self, job: &BuildJob) -> bool {
        if let Some(ids) = &self.project_ids {
            if !ids.contains(&job.project_id) {
                return false;
            }
        }
        if let Some(statuses) = &self.statuses {
            if !statuses.contains(&job.status) {
                return false;
            }
        }
        if self.git_ref.as_ref().is_some_and(|r| r != &job.git_ref) {
            return false;
        }
        if self.name.as_ref().is_some_and(|n| n != &job.name) {
            return false;
        }
        if let Some(flaky) = self.flaky {
            if job.flaky.unwrap_or(false) != flaky {
                return false;
            }
        }
        if !in_range(Some(job.created_at), self.created_from, self.created_to) {
            return false;
        }
        if (self.finished_from.is_some() || self.finished_to.is_some())
            && !in_range(job.finished_at, self.finished_from, self.finished_to)
        {
            return false;
        }
        true
    }
}

fn in_range(t: Option<Timestamp>, from: Option<Timestamp>, to: Option<Timestamp>) -> bool {
    let Some(t) = t else { return false };
    from.is_none_or(|f| t >= f) && to.is_none_or(|e| t < e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobPage {
    pub jobs: Vec<BuildJob>,
    pub total_count: usize,
    pub offset: usize,
    pub limit: usize,
}
