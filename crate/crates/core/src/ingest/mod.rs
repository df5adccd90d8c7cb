//! Synchronization with the actual twin: backfill, scheduled refresh and
//! webhook-driven updates, followed by flaky labeling, feature enrichment
//! and a `build-data.integrated` announcement per integrated batch.

mod backoff;
mod deadletter;
pub mod flaky;
pub mod preprocess;
pub mod webhook;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use backoff::{Backoff, Sleeper};
pub use deadletter::{DeadLetter, DeadLetterLog};
pub use flaky::{label_group, postprocess_flaky};
pub use preprocess::{map_status, parse_timestamp, preprocess, Unparseable};
pub use webhook::{parse_job_event, JobEvent, WebhookAuth, WebhookError, TOKEN_HEADER};

use crate::adapters::{raw_updated_at, ActualTwinReader, AdapterError, RawJob, MAX_PER_PAGE};
use crate::bus::{Bus, BusError, Topic};
use crate::clock::SharedClock;
use crate::model::{ts, DataIntegratedEvent, EventSource, Timestamp};
use crate::models::features;
use crate::store::{DerivedUpdate, Store, StoreError};

const HWM_COLLECTION: &str = "ingest.hwm";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackfillConfig {
    /// Projects to backfill; empty means every project the reader lists.
    #[serde(default)]
    pub project_ids: Vec<u64>,
    #[serde(default)]
    pub max_jobs_per_project: Option<usize>,
    #[serde(default = "default_page_size")]
    pub page_size: u32,
}

fn default_page_size() -> u32 {
    MAX_PER_PAGE
}

impl Default for BackfillConfig {
    fn default() -> Self {
        BackfillConfig {
            project_ids: Vec::new(),
            max_jobs_per_project: None,
            page_size: MAX_PER_PAGE,
        }
    }
}

impl BackfillConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if !(1..=MAX_PER_PAGE).contains(&self.page_size) {
            return Err(IngestError::InvalidConfig(format!(
                "page_size must be in [1, {MAX_PER_PAGE}]"
            )));
        }
        if self.max_jobs_per_project == Some(0) {
            return Err(IngestError::InvalidConfig(
                "max_jobs_per_project must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefreshConfig {
    pub interval_seconds: u64,
    pub enabled: bool,
}

impl Default for RefreshConfig {
    fn default() -> Self {
        RefreshConfig {
            interval_seconds: 300,
            enabled: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectSummary {
    pub fetched: usize,
    pub stored: usize,
    pub ignored: usize,
    pub quarantined: usize,
}

impl std::ops::AddAssign for ProjectSummary {
    fn add_assign(&mut self, o: Self) {
        self.fetched += o.fetched;
        self.stored += o.stored;
        self.ignored += o.ignored;
        self.quarantined += o.quarantined;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub fetched: usize,
    pub stored: usize,
    pub ignored: usize,
    pub quarantined: usize,
    pub events_published: usize,
    pub projects: BTreeMap<u64, ProjectSummary>,
}

impl IngestSummary {
    fn record(&mut self, project_id: u64, batch: &BatchOutcome) {
        let s = batch.summary;
        self.fetched += s.fetched;
        self.stored += s.stored;
        self.ignored += s.ignored;
        self.quarantined += s.quarantined;
        self.events_published += batch.event.is_some() as usize;
        *self.projects.entry(project_id).or_default() += s;
    }
}

/// Result of integrating one batch of raw records.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub summary: ProjectSummary,
    pub event: Option<DataIntegratedEvent>,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("actual twin unreachable: {message}")]
    Unreachable {
        message: String,
        partial: IngestSummary,
    },
    #[error("still rate limited after {attempts} attempts")]
    RateLimited {
        attempts: u32,
        partial: IngestSummary,
    },
    #[error("actual twin error: {message}")]
    Adapter {
        message: String,
        partial: IngestSummary,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl IngestError {
    fn from_adapter(e: AdapterError, attempts: u32, partial: IngestSummary) -> Self {
        match e {
            AdapterError::Unreachable(message) => IngestError::Unreachable { message, partial },
            AdapterError::RateLimited { .. } => IngestError::RateLimited { attempts, partial },
            other => IngestError::Adapter {
                message: other.to_string(),
                partial,
            },
        }
    }

    /// Work completed before the failure, if any.
    pub fn partial(&self) -> Option<&IngestSummary> {
        match self {
            IngestError::Unreachable { partial, .. }
            | IngestError::RateLimited { partial, .. }
            | IngestError::Adapter { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct WebhookTask {
    event: JobEvent,
    received: Instant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Trailing window of the history features.
    pub feature_window: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            feature_window: features::DEFAULT_WINDOW,
        }
    }
}

pub struct Ingestor {
    store: Arc<Store>,
    bus: Arc<Bus>,
    clock: SharedClock,
    reader: Arc<dyn ActualTwinReader>,
    dead_letters: Arc<DeadLetterLog>,
    backoff: Backoff,
    auth: Option<WebhookAuth>,
    options: IngestOptions,
    topic: Topic,
    queue: (Sender<WebhookTask>, Receiver<WebhookTask>),
    gate: Mutex<()>,
}

impl std::fmt::Debug for Ingestor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ingestor")
            .field("queued", &self.queue.1.len())
            .field("auth", &self.auth.is_some())
            .finish_non_exhaustive()
    }
}

impl Ingestor {
    pub fn new(
        store: Arc<Store>,
        bus: Arc<Bus>,
        clock: SharedClock,
        reader: Arc<dyn ActualTwinReader>,
        dead_letters: Arc<DeadLetterLog>,
    ) -> Self {
        Ingestor {
            store,
            bus,
            clock,
            reader,
            dead_letters,
            backoff: Backoff::default(),
            auth: None,
            options: IngestOptions::default(),
            topic: Topic::build_data_integrated(),
            queue: crossbeam_channel::unbounded(),
            gate: Mutex::new(()),
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_webhook_token(mut self, token: Option<&str>) -> Self {
        self.auth = token.map(WebhookAuth::new);
        self
    }

    pub fn with_options(mut self, options: IngestOptions) -> Self {
        self.options = options;
        self
    }

    pub fn dead_letters(&self) -> &DeadLetterLog {
        &self.dead_letters
    }

    pub fn reader(&self) -> &Arc<dyn ActualTwinReader> {
        &self.reader
    }

    fn quarantine(
        &self,
        source: EventSource,
        project_id: Option<u64>,
        reason: String,
        record: RawJob,
    ) {
        self.dead_letters.append(DeadLetter {
            at: self.clock.now(),
            source,
            reason,
            project_id,
            record,
        });
    }

    /// Calls the reader, backing off while it reports rate limiting.
    fn with_retry<T>(
        &self,
        mut call: impl FnMut() -> Result<T, AdapterError>,
    ) -> Result<T, (AdapterError, u32)> {
        let mut attempt = 0;
        loop {
            match call() {
                Err(AdapterError::RateLimited { retry_after })
                    if attempt + 1 < self.backoff.max_attempts =>
                {
                    let d = self.backoff.delay(attempt, retry_after);
                    tracing::debug!(?d, attempt, "rate limited, backing off");
                    self.backoff.sleep(d);
                    attempt += 1;
                }
                Err(e) => return Err((e, attempt + 1)),
                Ok(v) => return Ok(v),
            }
        }
    }

    fn ensure_projects(&self, project_ids: &BTreeSet<u64>) {
        let snap = self.store.snapshot();
        if project_ids.iter().all(|p| snap.project(*p).is_some()) {
            return;
        }
        match self.with_retry(|| self.reader.list_projects()) {
            Ok(projects) => {
                if let Err(e) = self.store.put_projects(projects) {
                    tracing::warn!(error = %e, "storing projects failed");
                }
            }
            Err((e, _)) => tracing::warn!(error = %e, "listing projects failed"),
        }
    }

    /// Preprocesses, stores and post-processes one batch, then publishes one
    /// event naming its jobs. Unparseable records are quarantined.
    pub fn integrate(
        &self,
        records: Vec<RawJob>,
        project_hint: Option<u64>,
        source: EventSource,
    ) -> Result<BatchOutcome, IngestError> {
        let _serial = self.gate.lock();
        let mut summary = ProjectSummary {
            fetched: records.len(),
            ..Default::default()
        };
        let mut jobs = Vec::with_capacity(records.len());
        for raw in records {
            match preprocess(&raw, project_hint) {
                Ok(job) => jobs.push(job),
                Err(e) => {
                    summary.quarantined += 1;
                    self.quarantine(source, project_hint, e.reason, raw);
                }
            }
        }
        if jobs.is_empty() {
            return Ok(BatchOutcome {
                summary,
                event: None,
            });
        }
        self.ensure_projects(&jobs.iter().map(|j| j.project_id).collect());

        let before = self.store.snapshot();
        let upsert = self.store.upsert_jobs(jobs.clone())?;
        summary.stored = upsert.stored();
        summary.ignored = upsert.ignored;
        let after = self.store.snapshot();

        let pipelines: BTreeSet<(u64, u64)> =
            jobs.iter().map(|j| (j.project_id, j.pipeline_id)).collect();
        let mut flaky_changes: BTreeMap<u64, Option<bool>> = BTreeMap::new();
        for (project, pipeline) in &pipelines {
            flaky_changes.extend(flaky::pipeline_changes(&after, *project, *pipeline));
        }

        let window = self.options.feature_window;
        let mut recompute = BTreeSet::new();
        for job in &jobs {
            let Some(now) = after.job(job.job_id) else {
                continue;
            };
            let changed = before
                .job(job.job_id)
                .is_none_or(|old| !old.same_source_fields(now));
            if changed {
                recompute.extend(features::dependents(&after, now, window));
                if let Some(old) = before.job(job.job_id) {
                    // Jobs that depended on the previous record may have moved out of range.
                    recompute.extend(features::dependents(&after, old, window));
                }
            } else if now.features.is_empty() {
                recompute.insert(now.job_id);
            }
        }
        let mut updates: BTreeMap<u64, DerivedUpdate> = BTreeMap::new();
        for id in recompute {
            let Some(job) = after.job(id) else { continue };
            let f = features::compute(&after, job, window);
            if f != job.features {
                updates
                    .entry(id)
                    .or_insert_with(|| DerivedUpdate {
                        job_id: id,
                        flaky: None,
                        features: None,
                    })
                    .features = Some(f);
            }
        }
        for (id, label) in &flaky_changes {
            updates
                .entry(*id)
                .or_insert_with(|| DerivedUpdate {
                    job_id: *id,
                    flaky: None,
                    features: None,
                })
                .flaky = Some(*label);
        }
        if !updates.is_empty() {
            self.store.set_derived(updates.into_values().collect())?;
        }

        let finalized = self.store.snapshot();
        let mut job_ids: BTreeSet<u64> = jobs
            .iter()
            .map(|j| j.job_id)
            .filter(|id| finalized.job(*id).is_some())
            .collect();
        job_ids.extend(
            flaky_changes
                .keys()
                .copied()
                .filter(|id| finalized.job(*id).is_some()),
        );
        if job_ids.is_empty() {
            return Ok(BatchOutcome {
                summary,
                event: None,
            });
        }
        let event = DataIntegratedEvent {
            event_id: format!("evt-{}", self.store.next_id("event")?),
            emitted_at: self.clock.now(),
            job_ids: job_ids.into_iter().collect(),
            source,
        };
        self.bus.publish(&self.topic, event.clone())?;
        Ok(BatchOutcome {
            summary,
            event: Some(event),
        })
    }

    /// Pages each project's history newest-first until it is exhausted or the
    /// per-project limit is reached. Progress made before an error is kept.
    pub fn backfill(&self, cfg: &BackfillConfig) -> Result<IngestSummary, IngestError> {
        cfg.validate()?;
        let mut summary = IngestSummary::default();
        let listed = self
            .with_retry(|| self.reader.list_projects())
            .map_err(|(e, n)| IngestError::from_adapter(e, n, summary.clone()))?;
        let targets: Vec<u64> = if cfg.project_ids.is_empty() {
            listed.iter().map(|p| p.project_id).collect()
        } else {
            cfg.project_ids.clone()
        };
        self.store.put_projects(listed)?;
        for project in targets {
            summary.projects.entry(project).or_default();
            let mut page = 1;
            let mut taken = 0usize;
            loop {
                let remaining = cfg.max_jobs_per_project.map(|l| l.saturating_sub(taken));
                if remaining == Some(0) {
                    break;
                }
                let fetched = self
                    .with_retry(|| self.reader.list_jobs(project, page, cfg.page_size, None))
                    .map_err(|(e, n)| IngestError::from_adapter(e, n, summary.clone()))?;
                let mut records = fetched.records;
                if let Some(r) = remaining {
                    records.truncate(r);
                }
                if records.is_empty() {
                    break;
                }
                taken += records.len();
                let outcome = self.integrate(records, Some(project), EventSource::Backfill)?;
                summary.record(project, &outcome);
                match fetched.next_page {
                    Some(n) if n > page => page = n,
                    _ => break,
                }
            }
        }
        Ok(summary)
    }

    /// Persisted high-water mark of a project.
    pub fn high_water_mark(&self, project_id: u64) -> Option<Timestamp> {
        self.store
            .get_doc::<String>(HWM_COLLECTION, &project_id.to_string())
            .ok()
            .flatten()
            .and_then(|s| parse_timestamp(&s))
    }

    /// Fetches what changed since each project's high-water mark. The mark
    /// advances only after every page of that project has been stored.
    pub fn refresh_once(&self) -> Result<IngestSummary, IngestError> {
        let mut summary = IngestSummary::default();
        let mut projects: BTreeSet<u64> = self.store.snapshot().project_ids().into_iter().collect();
        if projects.is_empty() {
            let listed = self
                .with_retry(|| self.reader.list_projects())
                .map_err(|(e, n)| IngestError::from_adapter(e, n, summary.clone()))?;
            projects.extend(listed.iter().map(|p| p.project_id));
            self.store.put_projects(listed)?;
        }
        for project in projects {
            let snap = self.store.snapshot();
            let hwm = self
                .high_water_mark(project)
                .or_else(|| snap.project_jobs(project).map(|j| j.updated_at()).max());
            summary.projects.entry(project).or_default();
            let mut newest = hwm;
            let mut page = 1;
            loop {
                let fetched = self
                    .with_retry(|| self.reader.list_jobs(project, page, MAX_PER_PAGE, hwm))
                    .map_err(|(e, n)| IngestError::from_adapter(e, n, summary.clone()))?;
                if fetched.records.is_empty() {
                    break;
                }
                newest = fetched
                    .records
                    .iter()
                    .filter_map(raw_updated_at)
                    .chain(newest)
                    .max();
                let outcome = self.integrate(
                    fetched.records,
                    Some(project),
                    EventSource::ScheduledRefresh,
                )?;
                summary.record(project, &outcome);
                match fetched.next_page {
                    Some(n) if n > page => page = n,
                    _ => break,
                }
            }
            if let Some(t) = newest {
                if Some(t) != self.high_water_mark(project) {
                    self.store
                        .put_doc(HWM_COLLECTION, &project.to_string(), &ts::format(&t))?;
                }
            }
        }
        Ok(summary)
    }

    /// Authenticates (before looking at the body), parses and enqueues a
    /// job event. Fetching and storing happen on the worker side.
    pub fn handle_webhook(
        &self,
        token: Option<&[u8]>,
        body: &[u8],
    ) -> Result<JobEvent, WebhookError> {
        if !self.auth.as_ref().is_some_and(|a| a.verify(token)) {
            return Err(WebhookError::Unauthorized);
        }
        let event = parse_job_event(body)?;
        let _ = self.queue.0.send(WebhookTask {
            event: event.clone(),
            received: Instant::now(),
        });
        Ok(event)
    }

    pub fn queued_webhooks(&self) -> usize {
        self.queue.1.len()
    }

    /// Processes every queued webhook on the calling thread.
    pub fn process_webhooks(&self) -> usize {
        let mut n = 0;
        while let Ok(task) = self.queue.1.try_recv() {
            self.process_task(task);
            n += 1;
        }
        n
    }

    /// Processes webhooks until `stop` fires or its sender is dropped.
    pub fn run_webhook_worker(&self, stop: Receiver<()>) {
        loop {
            crossbeam_channel::select! {
                recv(self.queue.1) -> task => match task {
                    Ok(task) => self.process_task(task),
                    Err(_) => return,
                },
                recv(stop) -> _ => return,
            }
        }
    }

    fn process_task(&self, task: WebhookTask) {
        let JobEvent {
            project_id,
            job_id,
            body,
            ..
        } = task.event;
        match self.with_retry(|| self.reader.get_job(project_id, job_id)) {
            Ok(raw) => {
                if let Err(e) = self.integrate(vec![raw], Some(project_id), EventSource::Webhook) {
                    tracing::error!(error = %e, job_id, "webhook integration failed");
                    self.quarantine(EventSource::Webhook, Some(project_id), e.to_string(), body);
                }
            }
            Err((e, _)) => {
                self.quarantine(
                    EventSource::Webhook,
                    Some(project_id),
                    format!("fetch failed: {e}"),
                    body,
                );
            }
        }
        tracing::trace!(job_id, elapsed = ?task.received.elapsed(), "webhook processed");
    }

    /// Runs `refresh_once` every `interval` until `stop` fires.
    pub fn run_refresh_loop(&self, interval: Duration, stop: Receiver<()>) {
        loop {
            if let Err(e) = self.refresh_once() {
                tracing::warn!(error = %e, "scheduled refresh failed");
            }
            match stop.recv_timeout(interval) {
                Err(crossbeam_channel::RecvTimeoutError::Timeout) => continue,
                _ => return,
            }
        }
    }

    /// Re-runs quarantined records through preprocessing. Records that parse
    /// now are stored; the rest are quarantined again.
    pub fn replay_dead_letters(
        &self,
        letters: Vec<DeadLetter>,
    ) -> Result<IngestSummary, IngestError> {
        let mut summary = IngestSummary::default();
        for letter in letters {
            let project = letter.project_id.unwrap_or(0);
            let records = match parse_job_event(letter.record.to_string().as_bytes()) {
                Ok(event) => {
                    match self.with_retry(|| self.reader.get_job(event.project_id, event.job_id)) {
                        Ok(raw) => vec![raw],
                        Err((e, n)) => return Err(IngestError::from_adapter(e, n, summary)),
                    }
                }
                Err(_) => vec![letter.record],
            };
            let outcome = self.integrate(records, letter.project_id, letter.source)?;
            summary.record(project, &outcome);
        }
        Ok(summary)
    }
}
