//! Blocking client for the GitLab v4 REST API.

use std::time::Duration;

use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use serde_json::{json, Value};

use super::{check_per_page, ActualTwinReader, ActualTwinWriter, AdapterError, RawJob, RawPage};
use crate::model::{ts, Project, Timestamp};

#[derive(Clone)]
pub struct GitLabClient {
    base: String,
    token: String,
    branch: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for GitLabClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GitLabClient")
            .field("base", &self.base)
            .finish_non_exhaustive()
    }
}

impl GitLabClient {
    /// `base_url` is the instance root, e.g. `https://gitlab.example.com`.
    pub fn new(base_url: &str, token: &str, timeout: Duration) -> Self {
        GitLabClient {
            base: format!("{}/api/v4", base_url.trim_end_matches('/')),
            token: token.to_string(),
            branch: "main".to_string(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    /// Branch used for repository file commits.
    pub fn with_branch(mut self, branch: &str) -> Self {
        self.branch = branch.to_string();
        self
    }

    fn request(&self, method: &str, path: &str) -> ureq::Request {
        self.agent
            .request(method, &format!("{}{}", self.base, path))
            .set("PRIVATE-TOKEN", &self.token)
    }

    fn send(
        &self,
        req: ureq::Request,
        body: Option<Value>,
    ) -> Result<ureq::Response, AdapterError> {
        let result = match body {
            Some(b) => req.send_json(b),
            None => req.call(),
        };
        result.map_err(map_error)
    }

    fn json(resp: ureq::Response) -> Result<Value, AdapterError> {
        resp.into_json()
            .map_err(|e| AdapterError::Unreachable(format!("malformed response: {e}")))
    }
}

fn map_error(e: ureq::Error) -> AdapterError {
    match e {
        ureq::Error::Status(code, resp) => {
            let retry_after = resp
                .header("retry-after")
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            let message = resp
                .into_string()
                .unwrap_or_default()
                .chars()
                .take(300)
                .collect::<String>();
            match code {
                429 => AdapterError::RateLimited { retry_after },
                404 => AdapterError::NotFound(message),
                400 | 422 => AdapterError::InvalidRequest(message),
                401 | 403 => AdapterError::Rejected(format!("{code}: {message}")),
                c if c >= 500 => AdapterError::Unreachable(format!("{code}: {message}")),
                c => AdapterError::Rejected(format!("{c}: {message}")),
            }
        }
        ureq::Error::Transport(t) => AdapterError::Unreachable(t.to_string()),
    }
}

fn id_of(v: &Value) -> Result<String, AdapterError> {
    v.get("id")
        .and_then(Value::as_u64)
        .map(|id| id.to_string())
        .ok_or_else(|| AdapterError::Unreachable("response without id".into()))
}

impl ActualTwinReader for GitLabClient {
    fn list_projects(&self) -> Result<Vec<Project>, AdapterError> {
        let mut out = Vec::new();
        let mut page = 1u32;
        loop {
            let req = self
                .request("GET", "/projects")
                .query("membership", "true")
                .query("per_page", "100")
                .query("page", &page.to_string());
            let resp = self.send(req, None)?;
            let next = resp
                .header("x-next-page")
                .and_then(|v| v.parse::<u32>().ok());
            let body = Self::json(resp)?;
            for p in body.as_array().into_iter().flatten() {
                let Some(id) = p.get("id").and_then(Value::as_u64) else {
                    continue;
                };
                out.push(Project {
                    project_id: id,
                    path: p
                        .get("path_with_namespace")
                        .and_then(Value::as_str)
                        .unwrap_or_default()
                        .to_string(),
                    default_ref: p
                        .get("default_branch")
                        .and_then(Value::as_str)
                        .unwrap_or("main")
                        .to_string(),
                });
            }
            match next {
                Some(n) if n > page => page = n,
                _ => return Ok(out),
            }
        }
    }

    fn list_jobs(
        &self,
        project_id: u64,
        page: u32,
        per_page: u32,
        updated_after: Option<Timestamp>,
    ) -> Result<RawPage, AdapterError> {
        check_per_page(per_page)?;
        let mut req = self
            .request("GET", &format!("/projects/{project_id}/jobs"))
            .query("page", &page.to_string())
            .query("per_page", &per_page.to_string());
        if let Some(t) = updated_after {
            req = req.query("updated_after", &ts::format(&t));
        }
        let resp = self.send(req, None)?;
        let next_page = resp
            .header("x-next-page")
            .and_then(|v| v.parse::<u32>().ok());
        let body = Self::json(resp)?;
        let records = match body {
            Value::Array(items) => items,
            _ => {
                return Err(AdapterError::Unreachable(
                    "jobs response is not an array".into(),
                ))
            }
        };
        // The jobs endpoint may ignore updated_after; filter defensively.
        let records = match updated_after {
            Some(after) => records
                .into_iter()
                .filter(|r| super::raw_updated_at(r).is_none_or(|u| u > after))
                .collect(),
            None => records,
        };
        Ok(RawPage { records, next_page })
    }

    fn get_job(&self, project_id: u64, job_id: u64) -> Result<RawJob, AdapterError> {
        let resp = self.send(
            self.request("GET", &format!("/projects/{project_id}/jobs/{job_id}")),
            None,
        )?;
        Self::json(resp)
    }
}

impl ActualTwinWriter for GitLabClient {
    fn set_ci_variable(
        &self,
        project_id: u64,
        key: &str,
        value: &str,
    ) -> Result<String, AdapterError> {
        let encoded = utf8_percent_encode(key, NON_ALPHANUMERIC).to_string();
        let update = self.request(
            "PUT",
            &format!("/projects/{project_id}/variables/{encoded}"),
        );
        match self.send(update, Some(json!({ "value": value }))) {
            Ok(_) => Ok(format!("variable:{project_id}:{key}")),
            Err(AdapterError::NotFound(_)) => {
                let create = self.request("POST", &format!("/projects/{project_id}/variables"));
                self.send(create, Some(json!({ "key": key, "value": value })))?;
                Ok(format!("variable:{project_id}:{key}"))
            }
            Err(e) => Err(e),
        }
    }

    fn retry_job(&self, project_id: u64, job_id: u64) -> Result<String, AdapterError> {
        let resp = self.send(
            self.request(
                "POST",
                &format!("/projects/{project_id}/jobs/{job_id}/retry"),
            ),
            None,
        )?;
        id_of(&Self::json(resp)?)
    }

    fn upsert_file(
        &self,
        project_id: u64,
        path: &str,
        content: &str,
        message: &str,
    ) -> Result<String, AdapterError> {
        let encoded = utf8_percent_encode(path, NON_ALPHANUMERIC).to_string();
        let url = format!("/projects/{project_id}/repository/files/{encoded}");
        let body = json!({ "branch": self.branch, "content": content, "commit_message": message });
        let resp = match self.send(self.request("POST", &url), Some(body.clone())) {
            Err(AdapterError::InvalidRequest(_)) => {
                self.send(self.request("PUT", &url), Some(body))?
            }
            other => other?,
        };
        let v = Self::json(resp)?;
        Ok(v.get("revision")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("file:{project_id}:{path}")))
    }
}
