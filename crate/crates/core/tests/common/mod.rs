#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use cbdt::adapters::{ActualTwinReader, AdapterError, DumpReader, RawJob, RawPage};
use cbdt::adapters::{SimConfig, SimProject, Simulator};
use cbdt::clock::ManualClock;
use cbdt::config::Config;
use cbdt::ingest::parse_timestamp;
use cbdt::ingest::Backoff;
use cbdt::model::Project;
use cbdt::model::{BuildJob, JobStatus, Timestamp};
use cbdt::ops;
use cbdt::twin::{Twin, TwinParts};
use parking_lot::Mutex;

pub fn t(s: &str) -> Timestamp {
    parse_timestamp(s).expect("timestamp literal")
}

pub fn t0() -> Timestamp {
    t("2024-01-01T00:00:00Z")
}

/// One project running a single job name per pipeline.
pub fn one_project(seed: u64, rate_per_hour: f64) -> SimConfig {
    let mut p = SimProject::new(1, rate_per_hour);
    p.job_names = vec!["build".into()];
    SimConfig {
        seed,
        start: t0(),
        webhook_token: "sim-token".into(),
        projects: vec![p],
        regime_changes: Vec::new(),
    }
}

pub fn config_with(sim: SimConfig) -> Config {
    let mut c = Config::default();
    c.adapter.simulator = Some(sim);
    c
}

/// A twin over a simulator of exactly `n` jobs, with the clock past the
/// end of the history.
pub fn settled(sim: SimConfig, n: usize) -> (Twin, Arc<Simulator>, Arc<ManualClock>) {
    let mut c = config_with(sim);
    c.adapter.history_jobs = Some(n);
    let (twin, sim, clock) = ops::simulation(c).expect("simulation twin");
    clock.set(sim.end() + chrono::Duration::days(1));
    (twin, sim, clock)
}

pub fn export(twin: &Twin) -> String {
    let mut buf = Vec::new();
    twin.store.export_jobs(&mut buf).expect("export");
    String::from_utf8(buf).expect("utf8")
}

/// A valid job for the given status, created `minute` minutes after t0.
pub fn job(job_id: u64, pipeline_id: u64, name: &str, status: JobStatus, minute: i64) -> BuildJob {
    let created = t0() + chrono::Duration::minutes(minute);
    let started = !matches!(
        status,
        JobStatus::Created | JobStatus::Pending | JobStatus::Skipped | JobStatus::Canceled
    );
    let started = started.then(|| created + chrono::Duration::seconds(5));
    let finished = status
        .is_terminal()
        .then(|| created + chrono::Duration::seconds(65));
    BuildJob {
        job_id,
        project_id: 1,
        pipeline_id,
        name: name.into(),
        git_ref: "main".into(),
        commit_sha: format!("{pipeline_id:040x}"),
        status,
        created_at: created,
        started_at: started,
        finished_at: finished,
        queued_duration: started.map(|_| 5.0),
        duration: status.is_completed().then_some(60.0),
        runner_id: None,
        flaky: None,
        features: BTreeMap::new(),
    }
}

/// A reader whose job list can grow and which can be taken offline.
#[derive(Default)]
pub struct Upstream {
    pub jobs: Mutex<Vec<BuildJob>>,
    pub down: Mutex<bool>,
}

impl Upstream {
    fn reader(&self) -> Result<DumpReader, AdapterError> {
        if *self.down.lock() {
            return Err(AdapterError::Unreachable("connection refused".into()));
        }
        let projects = [Project {
            project_id: 1,
            path: "g/p".into(),
            default_ref: "main".into(),
        }];
        Ok(DumpReader::new(self.jobs.lock().clone()).with_projects(projects))
    }
}

impl ActualTwinReader for Upstream {
    fn list_projects(&self) -> Result<Vec<Project>, AdapterError> {
        self.reader()?.list_projects()
    }

    fn list_jobs(
        &self,
        project_id: u64,
        page: u32,
        per_page: u32,
        updated_after: Option<Timestamp>,
    ) -> Result<RawPage, AdapterError> {
        self.reader()?
            .list_jobs(project_id, page, per_page, updated_after)
    }

    fn get_job(&self, project_id: u64, job_id: u64) -> Result<RawJob, AdapterError> {
        self.reader()?.get_job(project_id, job_id)
    }
}

pub fn twin_over(up: Arc<Upstream>) -> Twin {
    let mut config = Config::default();
    config.ingest.webhook_token = Some("hook".into());
    let mut backoff = Backoff::default().with_sleeper(Arc::new(|_| {}));
    backoff.max_attempts = 3;
    Twin::new(TwinParts::new(config, Arc::new(ManualClock::new(t0())), up).backoff(backoff))
        .unwrap()
}

/// Makes `j` the upstream's current state of that job, sends its webhook and
/// drains the twin.
pub fn deliver(twin: &Twin, up: &Upstream, j: &BuildJob) {
    {
        let mut jobs = up.jobs.lock();
        jobs.retain(|x| x.job_id != j.job_id);
        jobs.push(j.clone());
    }
    let body = cbdt::adapters::dump::webhook_body(j).to_string();
    twin.ingest
        .handle_webhook(Some(b"hook"), body.as_bytes())
        .expect("webhook accepted");
    twin.pump();
}
