//! Seeded CI platform simulator.
//!
//! The whole history for the configured horizon is generated up front from
//! the seed; the clock only controls what is visible. Each (pipeline, job
//! name) pair forms a retry chain of one of three shapes:
//!
//! * clean: one successful attempt;
//! * genuine failure: `max_retries + 1` failed attempts;
//! * flaky failure: one failed attempt followed by a successful rerun.
//!
//! The chain-level probabilities are calibrated so that the job-level
//! failure ratio converges to `p_fail` and the fraction of failed jobs that
//! are flaky converges to `p_flaky`, which is how the twin measures them.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use chrono::Duration as ChronoDuration;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{check_per_page, ActualTwinReader, ActualTwinWriter, AdapterError, RawJob, RawPage};
use crate::clock::SharedClock;
use crate::model::{truncate_millis, ts, JobStatus, Project, Timestamp};

const RETRY_DELAY_MS: i64 = 5_000;

fn default_start() -> Timestamp {
    chrono::DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z")
        .expect("valid literal")
        .with_timezone(&chrono::Utc)
}

fn default_token() -> String {
    "sim-token".to_string()
}

fn default_ref() -> String {
    "main".to_string()
}

fn default_names() -> Vec<String> {
    vec!["build".to_string()]
}

fn default_retries() -> u32 {
    1
}

fn default_queue() -> f64 {
    10.0
}

fn default_ref_share() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    #[serde(with = "ts", default = "default_start")]
    pub start: Timestamp,
    #[serde(default = "default_token")]
    pub webhook_token: String,
    pub projects: Vec<SimProject>,
    #[serde(default)]
    pub regime_changes: Vec<RegimeChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimProject {
    pub project_id: u64,
    #[serde(default)]
    pub path: String,
    #[serde(default = "default_ref")]
    pub default_ref: String,
    /// Pipeline arrivals per hour (Poisson).
    pub arrival_rate_per_hour: f64,
    /// Job names run by every pipeline.
    #[serde(default = "default_names")]
    pub job_names: Vec<String>,
    /// Mean of log-duration in log-seconds.
    pub duration_log_mean: f64,
    pub duration_log_sigma: f64,
    /// Target fraction of completed jobs that fail.
    pub p_fail: f64,
    /// Target fraction of failed jobs that are flaky.
    #[serde(default)]
    pub p_flaky: f64,
    /// Fraction of chains canceled before running.
    #[serde(default)]
    pub p_cancel: f64,
    /// Reruns after a failure; 0 disables retries.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_queue")]
    pub queue_mean_seconds: f64,
    /// Share of pipelines on the default branch.
    #[serde(default = "default_ref_share")]
    pub default_ref_share: f64,
}

impl SimProject {
    pub fn new(project_id: u64, arrival_rate_per_hour: f64) -> Self {
        SimProject {
            project_id,
            path: format!("group/project-{project_id}"),
            default_ref: default_ref(),
            arrival_rate_per_hour,
            job_names: default_names(),
            duration_log_mean: 300f64.ln(),
            duration_log_sigma: 0.5,
            p_fail: 0.2,
            p_flaky: 0.5,
            p_cancel: 0.0,
            max_retries: 1,
            queue_mean_seconds: default_queue(),
            default_ref_share: default_ref_share(),
        }
    }

    /// Chain-level (failure, flaky-given-failure) probabilities that make the
    /// job-level ratios converge to `p_fail` and `p_flaky`.
    pub fn calibrated(&self) -> (f64, f64) {
        let k = self.max_retries as f64;
        let r = self.p_flaky;
        let p = self.p_fail;
        let b = if self.max_retries == 0 {
            0.0
        } else {
            r * (k + 1.0) / (1.0 + r * k)
        };
        let failed_per_failing_chain = (1.0 - b) * (k + 1.0) + b;
        let extra_completed = failed_per_failing_chain + b - 1.0;
        let a = p / (failed_per_failing_chain - p * extra_completed);
        (a, b)
    }
}

/// Multiplies durations of jobs created at or after `at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeChange {
    pub project_id: u64,
    #[serde(with = "ts")]
    pub at: Timestamp,
    pub duration_factor: f64,
    #[serde(default)]
    pub job_name: Option<String>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        let bad = |m: String| Err(AdapterError::InvalidRequest(m));
        if self.projects.is_empty() {
            return bad("at least one project required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.projects {
            let id = p.project_id;
            if !seen.insert(id) {
                return bad(format!("duplicate project {id}"));
            }
            if !(p.arrival_rate_per_hour.is_finite() && p.arrival_rate_per_hour > 0.0) {
                return bad(format!("project {id}: arrival rate must be > 0"));
            }
            if p.job_names.is_empty() || p.job_names.iter().any(String::is_empty) {
                return bad(format!("project {id}: job names must be non-empty"));
            }
            if !p.duration_log_mean.is_finite()
                || !(p.duration_log_sigma.is_finite() && p.duration_log_sigma >= 0.0)
            {
                return bad(format!("project {id}: invalid duration distribution"));
            }
            for (name, v) in [
                ("p_fail", p.p_fail),
                ("p_flaky", p.p_flaky),
                ("p_cancel", p.p_cancel),
                ("default_ref_share", p.default_ref_share),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("project {id}: {name} must be in [0, 1]"));
                }
            }
            if p.max_retries == 0 && p.p_flaky > 0.0 {
                return bad(format!("project {id}: p_flaky > 0 requires retries"));
            }
            if !(p.queue_mean_seconds.is_finite() && p.queue_mean_seconds >= 0.0) {
                return bad(format!("project {id}: queue mean must be ≥ 0"));
            }
            let (a, _) = p.calibrated();
            if !(0.0..=1.0).contains(&a) || !a.is_finite() {
                return bad(format!(
                    "project {id}: p_fail/p_flaky combination unreachable"
                ));
            }
        }
        for rc in &self.regime_changes {
            if !seen.contains(&rc.project_id) {
                return bad(format!(
                    "regime change for unknown project {}",
                    rc.project_id
                ));
            }
            if !(rc.duration_factor.is_finite() && rc.duration_factor > 0.0) {
                return bad("regime duration_factor must be > 0".into());
            }
        }
        Ok(())
    }
}

/// One generated job attempt with its final outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SimJob {
    pub job_id: u64,
    pub project_id: u64,
    pub pipeline_id: u64,
    pub name: String,
    pub git_ref: String,
    pub sha: String,
    pub created_at: Timestamp,
    pub started_at: Option<Timestamp>,
    pub finished_at: Timestamp,
    pub final_status: JobStatus,
    pub duration: Option<f64>,
    pub queued_duration: Option<f64>,
    pub runner_id: Option<u64>,
    /// Ground truth: this failure is resolved by a later successful rerun.
    pub flaky: bool,
    /// Ground truth: chain shape is a genuine failure.
    genuine: bool,
}

impl SimJob {
    pub fn status_at(&self, now: Timestamp) -> Option<JobStatus> {
        if now < self.created_at {
            return None;
        }
        if now >= self.finished_at {
            return Some(self.final_status);
        }
        match self.started_at {
            Some(s) if now >= s => Some(JobStatus::Running),
            _ => Some(JobStatus::Pending),
        }
    }

    pub fn updated_at(&self, now: Timestamp) -> Option<Timestamp> {
        let status = self.status_at(now)?;
        Some(if status.is_terminal() {
            self.finished_at
        } else if status == JobStatus::Running {
            self.started_at.unwrap_or(self.created_at)
        } else {
            self.created_at
        })
    }

    /// GitLab jobs API representation as of `now`.
    pub fn raw_at(&self, now: Timestamp) -> Option<RawJob> {
        let status = self.status_at(now)?;
        let started = self.started_at.filter(|s| *s <= now);
        let terminal = status.is_terminal();
        Some(json!({
            "id": self.job_id,
            "name": self.name,
            "stage": "test",
            "status": status.as_str(),
            "ref": self.git_ref,
            "tag": false,
            "allow_failure": false,
            "created_at": ts::format(&self.created_at),
            "started_at": started.map(|t| ts::format(&t)),
            "finished_at": terminal.then(|| ts::format(&self.finished_at)),
            "duration": if terminal { self.duration } else { None },
            "queued_duration": started.and(self.queued_duration),
            "pipeline": {
                "id": self.pipeline_id,
                "project_id": self.project_id,
                "ref": self.git_ref,
                "sha": self.sha,
            },
            "commit": { "id": self.sha },
            "runner": started.and(self.runner_id).map(|id| json!({ "id": id })),
        }))
    }

    fn webhook_body(&self, status: JobStatus) -> String {
        let terminal = status.is_terminal();
        let started = status.precedence() >= 2 && self.started_at.is_some();
        let body = json!({
            "object_kind": "build",
            "build_id": self.job_id,
            "build_name": self.name,
            "build_stage": "test",
            "build_status": status.as_str(),
            "build_created_at": ts::format(&self.created_at),
            "build_started_at": if started { self.started_at.map(|t| ts::format(&t)) } else { None },
            "build_finished_at": terminal.then(|| ts::format(&self.finished_at)),
            "build_duration": if terminal { self.duration } else { None },
            "build_queued_duration": if started { self.queued_duration } else { None },
            "pipeline_id": self.pipeline_id,
            "project_id": self.project_id,
            "ref": self.git_ref,
            "sha": self.sha,
        });
        serde_json::to_string(&body).expect("json value serializes")
    }

    fn deliveries(&self, token: &str) -> Vec<WebhookDelivery> {
        let mut out = vec![self.delivery(self.created_at, JobStatus::Pending, token)];
        if let Some(s) = self.started_at {
            out.push(self.delivery(s, JobStatus::Running, token));
        }
        out.push(self.delivery(self.finished_at, self.final_status, token));
        out
    }

    fn delivery(&self, at: Timestamp, status: JobStatus, token: &str) -> WebhookDelivery {
        WebhookDelivery {
            at,
            job_id: self.job_id,
            project_id: self.project_id,
            status,
            token: token.to_string(),
            body: self.webhook_body(status),
        }
    }
}

/// One job-event webhook call as the platform would send it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebhookDelivery {
    #[serde(with = "ts")]
    pub at: Timestamp,
    pub job_id: u64,
    pub project_id: u64,
    pub status: JobStatus,
    pub token: String,
    pub body: String,
}

#[derive(Debug, Default)]
struct Faults {
    rate_limited_calls: u32,
    retry_after: Option<Duration>,
    unreachable: bool,
}

struct State {
    jobs: Vec<SimJob>,
    by_project: BTreeMap<u64, Vec<usize>>,
    extra_deliveries: Vec<WebhookDelivery>,
    variables: BTreeMap<(u64, String), String>,
    files: BTreeMap<(u64, String), (String, u64)>,
    writer_rng: ChaCha8Rng,
    faults: Faults,
    calls: u64,
}

pub struct Simulator {
    config: SimConfig,
    clock: SharedClock,
    end: Timestamp,
    state: Mutex<State>,
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator")
            .field("seed", &self.config.seed)
            .field("jobs", &self.state.lock().jobs.len())
            .finish()
    }
}

struct Attempt {
    project_id: u64,
    pipeline_seq: u64,
    pipeline_created: Timestamp,
    name_idx: usize,
    attempt: u32,
    job: SimJob,
}

fn project_rng(seed: u64, project_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ project_id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn hex_sha(rng: &mut ChaCha8Rng) -> String {
    (0..20)
        .map(|_| format!("{:02x}", rng.gen::<u8>()))
        .collect()
}

fn millis(seconds: f64) -> ChronoDuration {
    ChronoDuration::milliseconds((seconds * 1000.0).round() as i64)
}

fn round_ms(seconds: f64) -> f64 {
    (seconds * 1000.0).round() / 1000.0
}

impl Simulator {
    /// Generates every pipeline arriving in `[start, start + horizon)`.
    pub fn new(
        config: SimConfig,
        horizon: ChronoDuration,
        clock: SharedClock,
    ) -> Result<Arc<Self>, AdapterError> {
        config.validate()?;
        let end = config.start + horizon;
        let jobs = generate(&config, end);
        Ok(Self::assemble(config, clock, end, jobs))
    }

    /// The first `n` jobs of the seeded history, in creation order.
    pub fn with_jobs(
        config: SimConfig,
        n: usize,
        clock: SharedClock,
    ) -> Result<Arc<Self>, AdapterError> {
        Self::truncated(config, clock, |jobs| (jobs.len() >= n).then_some(n))
    }

    /// The seeded history up to and including its `n`-th completed job.
    pub fn with_completed_jobs(
        config: SimConfig,
        n: usize,
        clock: SharedClock,
    ) -> Result<Arc<Self>, AdapterError> {
        Self::truncated(config, clock, |jobs| {
            let mut completed = 0;
            jobs.iter()
                .position(|j| {
                    completed += j.final_status.is_completed() as usize;
                    completed == n
                })
                .map(|i| i + 1)
        })
    }

    fn truncated(
        config: SimConfig,
        clock: SharedClock,
        cut: impl Fn(&[SimJob]) -> Option<usize>,
    ) -> Result<Arc<Self>, AdapterError> {
        config.validate()?;
        let mut horizon = ChronoDuration::hours(1);
        loop {
            let mut jobs = generate(&config, config.start + horizon);
            if let Some(keep) = cut(&jobs) {
                jobs.truncate(keep);
                let end = jobs.last().map_or(config.start, |j| {
                    j.created_at + ChronoDuration::milliseconds(1)
                });
                return Ok(Self::assemble(config, clock, end, jobs));
            }
            if horizon > ChronoDuration::days(365 * 50) {
                return Err(AdapterError::InvalidRequest(
                    "requested history is too large".into(),
                ));
            }
            horizon = horizon * 2;
        }
    }

    fn assemble(
        config: SimConfig,
        clock: SharedClock,
        end: Timestamp,
        jobs: Vec<SimJob>,
    ) -> Arc<Self> {
        let mut by_project: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, job) in jobs.iter().enumerate() {
            by_project.entry(job.project_id).or_default().push(i);
        }
        for p in &config.projects {
            by_project.entry(p.project_id).or_default();
        }
        let writer_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_0A11);
        Arc::new(Simulator {
            config,
            clock,
            end,
            state: Mutex::new(State {
                jobs,
                by_project,
                extra_deliveries: Vec::new(),
                variables: BTreeMap::new(),
                files: BTreeMap::new(),
                writer_rng,
                faults: Faults::default(),
                calls: 0,
            }),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn start(&self) -> Timestamp {
        self.config.start
    }

    pub fn end(&self) -> Timestamp {
        self.end
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    /// Every generated attempt, including reruns requested through the writer.
    pub fn jobs(&self) -> Vec<SimJob> {
        self.state.lock().jobs.clone()
    }

    pub fn job(&self, job_id: u64) -> Option<SimJob> {
        let state = self.state.lock();
        job_id
            .checked_sub(1)
            .and_then(|i| state.jobs.get(i as usize))
            .cloned()
    }

    /// All webhook calls of the generated history, ordered by send time.
    pub fn deliveries(&self) -> Vec<WebhookDelivery> {
        let state = self.state.lock();
        let mut out: Vec<WebhookDelivery> = state
            .jobs
            .iter()
            .flat_map(|j| j.deliveries(&self.config.webhook_token))
            .collect();
        out.sort_by(|a, b| {
            (a.at, a.job_id, a.status.precedence()).cmp(&(b.at, b.job_id, b.status.precedence()))
        });
        out
    }

    /// Webhook calls caused by writer actions since the last call.
    pub fn take_extra_deliveries(&self) -> Vec<WebhookDelivery> {
        std::mem::take(&mut self.state.lock().extra_deliveries)
    }

    pub fn variable(&self, project_id: u64, key: &str) -> Option<String> {
        self.state
            .lock()
            .variables
            .get(&(project_id, key.to_string()))
            .cloned()
    }

    pub fn file(&self, project_id: u64, path: &str) -> Option<String> {
        self.state
            .lock()
            .files
            .get(&(project_id, path.to_string()))
            .map(|(c, _)| c.clone())
    }

    /// The next `calls` reader calls fail with `RateLimited`.
    pub fn inject_rate_limit(&self, calls: u32, retry_after: Option<Duration>) {
        let mut s = self.state.lock();
        s.faults.rate_limited_calls = calls;
        s.faults.retry_after = retry_after;
    }

    pub fn set_unreachable(&self, down: bool) {
        self.state.lock().faults.unreachable = down;
    }

    /// Number of reader calls served or refused so far.
    pub fn call_count(&self) -> u64 {
        self.state.lock().calls
    }

    fn gate(&self, state: &mut State) -> Result<(), AdapterError> {
        state.calls += 1;
        if state.faults.unreachable {
            return Err(AdapterError::Unreachable("simulator offline".into()));
        }
        if state.faults.rate_limited_calls > 0 {
            state.faults.rate_limited_calls -= 1;
            return Err(AdapterError::RateLimited {
                retry_after: state.faults.retry_after,
            });
        }
        Ok(())
    }

    fn project(&self, project_id: u64) -> Result<&SimProject, AdapterError> {
        self.config
            .projects
            .iter()
            .find(|p| p.project_id == project_id)
            .ok_or_else(|| AdapterError::NotFound(format!("project {project_id}")))
    }
}

/// Full history up to `end` with job and pipeline ids assigned in creation order.
fn generate(config: &SimConfig, end: Timestamp) -> Vec<SimJob> {
    let mut attempts = Vec::new();
    for project in &config.projects {
        generate_project(config, project, end, &mut attempts);
    }
    attempts.sort_by(|a, b| {
        (
            a.job.created_at,
            a.project_id,
            a.pipeline_seq,
            a.name_idx,
            a.attempt,
        )
            .cmp(&(
                b.job.created_at,
                b.project_id,
                b.pipeline_seq,
                b.name_idx,
                b.attempt,
            ))
    });
    let mut pipelines: Vec<(Timestamp, u64, u64)> = attempts
        .iter()
        .map(|a| (a.pipeline_created, a.project_id, a.pipeline_seq))
        .collect();
    pipelines.sort();
    pipelines.dedup();
    let pipeline_ids: BTreeMap<(u64, u64), u64> = pipelines
        .iter()
        .enumerate()
        .map(|(i, (_, p, s))| ((*p, *s), i as u64 + 1))
        .collect();
    attempts
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            let mut job = a.job;
            job.job_id = i as u64 + 1;
            job.pipeline_id = pipeline_ids[&(a.project_id, a.pipeline_seq)];
            job
        })
        .collect()
}

fn generate_project(cfg: &SimConfig, p: &SimProject, end: Timestamp, out: &mut Vec<Attempt>) {
    let mut rng = project_rng(cfg.seed, p.project_id);
    let (a, b) = p.calibrated();
    let arrivals = Exp::new(p.arrival_rate_per_hour / 3600.0).expect("validated rate");
    let queue = (p.queue_mean_seconds > 0.0)
        .then(|| Exp::new(1.0 / p.queue_mean_seconds).expect("validated queue"));
    let durations =
        LogNormal::new(p.duration_log_mean, p.duration_log_sigma).expect("validated lognormal");
    let factor_at = |t: Timestamp, name: &str| -> f64 {
        cfg.regime_changes
            .iter()
            .filter(|rc| rc.project_id == p.project_id && t >= rc.at)
            .filter(|rc| rc.job_name.as_deref().is_none_or(|n| n == name))
            .map(|rc| rc.duration_factor)
            .product()
    };
    let mut t = cfg.start;
    let mut pipeline_seq = 0u64;
    loop {
        t = truncate_millis(t + millis(arrivals.sample(&mut rng)));
        if t >= end {
            break;
        }
        pipeline_seq += 1;
        let git_ref = if rng.gen_bool(p.default_ref_share) {
            p.default_ref.clone()
        } else {
            format!("feature/{}", rng.gen_range(1..=20))
        };
        let sha = hex_sha(&mut rng);
        for (name_idx, name) in p.job_names.iter().enumerate() {
            let canceled = rng.gen_bool(p.p_cancel);
            let failing = !canceled && rng.gen_bool(a);
            let flaky_chain = failing && rng.gen_bool(b);
            let outcomes: Vec<JobStatus> = if canceled {
                vec![JobStatus::Canceled]
            } else if !failing {
                vec![JobStatus::Success]
            } else if flaky_chain {
                vec![JobStatus::Failed, JobStatus::Success]
            } else {
                vec![JobStatus::Failed; p.max_retries as usize + 1]
            };
            let mut created = t;
            for (attempt, status) in outcomes.iter().copied().enumerate() {
                let queued = round_ms(queue.map_or(0.0, |q| q.sample(&mut rng)));
                let runner_id = rng.gen_range(1..=8u64);
                let job = if status == JobStatus::Canceled {
                    SimJob {
                        job_id: 0,
                        project_id: p.project_id,
                        pipeline_id: 0,
                        name: name.clone(),
                        git_ref: git_ref.clone(),
                        sha: sha.clone(),
                        created_at: created,
                        started_at: None,
                        finished_at: created + millis(queued),
                        final_status: status,
                        duration: None,
                        queued_duration: None,
                        runner_id: None,
                        flaky: false,
                        genuine: false,
                    }
                } else {
                    let started = created + millis(queued);
                    let duration = round_ms(durations.sample(&mut rng) * factor_at(created, name));
                    SimJob {
                        job_id: 0,
                        project_id: p.project_id,
                        pipeline_id: 0,
                        name: name.clone(),
                        git_ref: git_ref.clone(),
                        sha: sha.clone(),
                        created_at: created,
                        started_at: Some(started),
                        finished_at: started + millis(duration),
                        final_status: status,
                        duration: Some(duration),
                        queued_duration: Some(queued),
                        runner_id: Some(runner_id),
                        flaky: flaky_chain && status == JobStatus::Failed,
                        genuine: failing && !flaky_chain,
                    }
                };
                created = job.finished_at + ChronoDuration::milliseconds(RETRY_DELAY_MS);
                out.push(Attempt {
                    project_id: p.project_id,
                    pipeline_seq,
                    pipeline_created: t,
                    name_idx,
                    attempt: attempt as u32,
                    job,
                });
            }
        }
    }
}

impl ActualTwinReader for Simulator {
    fn list_projects(&self) -> Result<Vec<Project>, AdapterError> {
        let mut state = self.state.lock();
        self.gate(&mut state)?;
        Ok(self
            .config
            .projects
            .iter()
            .map(|p| Project {
                project_id: p.project_id,
                path: if p.path.is_empty() {
                    format!("group/project-{}", p.project_id)
                } else {
                    p.path.clone()
                },
                default_ref: p.default_ref.clone(),
            })
            .collect())
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
        let now = self.clock.now();
        let mut state = self.state.lock();
        self.gate(&mut state)?;
        let Some(indices) = state.by_project.get(&project_id) else {
            return Err(AdapterError::NotFound(format!("project {project_id}")));
        };
        let visible: Vec<&SimJob> = indices
            .iter()
            .rev()
            .map(|i| &state.jobs[*i])
            .filter(|j| match j.updated_at(now) {
                None => false,
                Some(u) => updated_after.is_none_or(|after| u > after),
            })
            .collect();
        let start = (page as usize - 1) * per_page as usize;
        let records: Vec<RawJob> = visible
            .iter()
            .skip(start)
            .take(per_page as usize)
            .filter_map(|j| j.raw_at(now))
            .collect();
        let next_page = (start + (per_page as usize) < visible.len()).then_some(page + 1);
        Ok(RawPage { records, next_page })
    }

    fn get_job(&self, project_id: u64, job_id: u64) -> Result<RawJob, AdapterError> {
        let now = self.clock.now();
        let mut state = self.state.lock();
        self.gate(&mut state)?;
        job_id
            .checked_sub(1)
            .and_then(|i| state.jobs.get(i as usize))
            .filter(|j| j.project_id == project_id)
            .and_then(|j| j.raw_at(now))
            .ok_or_else(|| AdapterError::NotFound(format!("job {job_id} in project {project_id}")))
    }
}

impl ActualTwinWriter for Simulator {
    fn set_ci_variable(
        &self,
        project_id: u64,
        key: &str,
        value: &str,
    ) -> Result<String, AdapterError> {
        self.project(project_id)?;
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(AdapterError::Rejected(format!(
                "invalid variable key {key:?}"
            )));
        }
        let mut state = self.state.lock();
        state
            .variables
            .insert((project_id, key.to_string()), value.to_string());
        Ok(format!("variable:{project_id}:{key}"))
    }

    fn retry_job(&self, project_id: u64, job_id: u64) -> Result<String, AdapterError> {
        let project = self.project(project_id)?.clone();
        let now = self.clock.now();
        let mut state = self.state.lock();
        let original = job_id
            .checked_sub(1)
            .and_then(|i| state.jobs.get(i as usize))
            .filter(|j| j.project_id == project_id)
            .cloned()
            .ok_or_else(|| AdapterError::NotFound(format!("job {job_id}")))?;
        if !original.status_at(now).is_some_and(JobStatus::is_terminal) {
            return Err(AdapterError::Rejected(format!(
                "job {job_id} is not finished"
            )));
        }
        let (a, _) = project.calibrated();
        let rng = &mut state.writer_rng;
        let status = if original.flaky {
            JobStatus::Success
        } else if original.genuine || rng.gen_bool(a) {
            JobStatus::Failed
        } else {
            JobStatus::Success
        };
        let queued = round_ms(rng.gen_range(0.0..=project.queue_mean_seconds.max(0.001)));
        let duration = round_ms(
            LogNormal::new(project.duration_log_mean, project.duration_log_sigma)
                .expect("validated lognormal")
                .sample(rng),
        );
        let runner_id = rng.gen_range(1..=8u64);
        let new_id = state.jobs.len() as u64 + 1;
        let started = now + millis(queued);
        let job = SimJob {
            job_id: new_id,
            project_id,
            pipeline_id: original.pipeline_id,
            name: original.name.clone(),
            git_ref: original.git_ref.clone(),
            sha: original.sha.clone(),
            created_at: now,
            started_at: Some(started),
            finished_at: started + millis(duration),
            final_status: status,
            duration: Some(duration),
            queued_duration: Some(queued),
            runner_id: Some(runner_id),
            flaky: false,
            genuine: original.genuine,
        };
        let deliveries = job.deliveries(&self.config.webhook_token);
        state.extra_deliveries.extend(deliveries);
        state
            .by_project
            .entry(project_id)
            .or_default()
            .push(new_id as usize - 1);
        state.jobs.push(job);
        Ok(new_id.to_string())
    }

    fn upsert_file(
        &self,
        project_id: u64,
        path: &str,
        content: &str,
        _message: &str,
    ) -> Result<String, AdapterError> {
        self.project(project_id)?;
        if path.is_empty() || path.starts_with('/') || path.contains("..") {
            return Err(AdapterError::Rejected(format!(
                "invalid file path {path:?}"
            )));
        }
        let mut state = self.state.lock();
        let entry = state
            .files
            .entry((project_id, path.to_string()))
            .or_insert_with(|| (String::new(), 0));
        entry.0 = content.to_string();
        entry.1 += 1;
        Ok(format!("file:{project_id}:{path}@{}", entry.1))
    }
}
