//! Online predictors for duration, failure and flakiness.
//!
//! Every project has its own learners and a shared scope is fed every
//! observation. Predictions fall back from project to shared scope to an
//! uninformed prior. The whole set is published atomically as an immutable
//! [`ModelSet`]; readers never see a half-applied update.
//!
//! The flaky model estimates, for a failed job, the probability that its
//! retry group later succeeds. Its outcome is known once the next completed
//! attempt of the group arrives.

pub mod anomaly;
pub mod features;
pub mod learners;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use arc_swap::ArcSwap;
use crossbeam_channel::Receiver;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use self::anomaly::{log_duration, AnomalyConfig};
use self::features::{FeatureSchema, FeatureVector, SchemaMismatch};
use self::learners::{EwMeanVar, OnlineLogistic};
use crate::bus::Subscription;
use crate::clock::SharedClock;
use crate::model::{
    ts, BuildJob, DataIntegratedEvent, JobStatus, ModelKind, PredictionRecord, Timestamp,
};
use crate::store::{Mutation, Snapshot, Store, StoreError, Txn};

const STATE: &str = "models.state";
const EVENTS: &str = "models.events";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelsConfig {
    pub learning_rate: f64,
    pub alpha: f64,
    /// Duration predicted before any observation.
    pub prior_duration_seconds: f64,
    pub feature_window: usize,
    pub anomaly: AnomalyConfig,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            learning_rate: learners::DEFAULT_LEARNING_RATE,
            alpha: learners::DEFAULT_ALPHA,
            prior_duration_seconds: 600.0,
            feature_window: features::DEFAULT_WINDOW,
            anomaly: AnomalyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelScope {
    Project(u64),
    Shared,
}

impl ModelScope {
    pub fn key(self) -> String {
        match self {
            ModelScope::Project(p) => format!("project-{p}"),
            ModelScope::Shared => "shared".to_string(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelsError {
    #[error(transparent)]
    Schema(#[from] SchemaMismatch),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// An immutable description of one learner, as listed by the API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub model_snapshot_id: String,
    pub model_kind: ModelKind,
    pub scope: String,
    pub parameters: serde_json::Value,
    pub trained_on_count: u64,
    #[serde(with = "ts")]
    pub created_at: Timestamp,
}

/// Output of [`ModelSet::predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub value: f64,
    pub log_sigma: Option<f64>,
    pub snapshot_id: String,
    /// Observations behind the learner that answered.
    pub observations: u64,
}

/// Every learner at one point in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub version: u64,
    pub schema: FeatureSchema,
    pub learning_rate: f64,
    pub alpha: f64,
    pub prior_duration_seconds: f64,
    pub failure: BTreeMap<String, OnlineLogistic>,
    pub flaky: BTreeMap<String, OnlineLogistic>,
    pub duration: BTreeMap<String, EwMeanVar>,
    /// Last update time per "kind:scope".
    #[serde(default)]
    pub updated_at: BTreeMap<String, String>,
}

impl ModelSet {
    pub fn new(config: &ModelsConfig) -> Self {
        ModelSet {
            version: 0,
            schema: FeatureSchema::v1(config.feature_window),
            learning_rate: config.learning_rate,
            alpha: config.alpha,
            prior_duration_seconds: config.prior_duration_seconds,
            failure: BTreeMap::new(),
            flaky: BTreeMap::new(),
            duration: BTreeMap::new(),
            updated_at: BTreeMap::new(),
        }
    }

    /// Identifier of this whole set; changes with every update.
    pub fn id(&self) -> String {
        format!("models@{}", self.version)
    }

    fn logistic(&self, kind: ModelKind) -> &BTreeMap<String, OnlineLogistic> {
        match kind {
            ModelKind::Failure => &self.failure,
            ModelKind::Flaky => &self.flaky,
            ModelKind::Duration => unreachable!("duration is not logistic"),
        }
    }

    fn count(&self, kind: ModelKind, scope: &str) -> u64 {
        match kind {
            ModelKind::Duration => self.duration.get(scope).map_or(0, |m| m.count),
            k => self.logistic(k).get(scope).map_or(0, |m| m.count),
        }
    }

    /// The scope that answers for `project_id`: its own learner when
    /// trained, else the shared one when trained, else none (the prior).
    pub fn resolve_scope(&self, kind: ModelKind, project_id: u64) -> Option<String> {
        [ModelScope::Project(project_id), ModelScope::Shared]
            .into_iter()
            .map(ModelScope::key)
            .find(|s| self.count(kind, s) > 0)
    }

    pub fn predict(
        &self,
        kind: ModelKind,
        project_id: u64,
        x: &FeatureVector,
    ) -> Result<Prediction, SchemaMismatch> {
        let z = self.schema.scaled(x)?;
        let scope = self.resolve_scope(kind, project_id);
        let id = |scope: &str, n: u64| format!("{}:{scope}:{n}", kind.as_str());
        Ok(match (kind, scope) {
            (ModelKind::Duration, Some(s)) => {
                let m = &self.duration[&s];
                Prediction {
                    value: m.mean.exp(),
                    log_sigma: Some(m.std_dev()),
                    snapshot_id: id(&s, m.count),
                    observations: m.count,
                }
            }
            (ModelKind::Duration, None) => Prediction {
                value: self.prior_duration_seconds,
                log_sigma: None,
                snapshot_id: id("prior", 0),
                observations: 0,
            },
            (k, Some(s)) => {
                let m = &self.logistic(k)[&s];
                Prediction {
                    value: m.predict(&z),
                    log_sigma: None,
                    snapshot_id: id(&s, m.count),
                    observations: m.count,
                }
            }
            (_, None) => Prediction {
                value: 0.5,
                log_sigma: None,
                snapshot_id: id("prior", 0),
                observations: 0,
            },
        })
    }

    /// One incremental step on the project's learner and the shared one.
    pub fn update(
        &mut self,
        kind: ModelKind,
        project_id: u64,
        x: &FeatureVector,
        actual: f64,
        at: Timestamp,
    ) -> Result<(), SchemaMismatch> {
        let z = self.schema.scaled(x)?;
        for scope in [ModelScope::Project(project_id), ModelScope::Shared].map(ModelScope::key) {
            match kind {
                ModelKind::Duration => self
                    .duration
                    .entry(scope.clone())
                    .or_insert_with(|| EwMeanVar::new(self.alpha))
                    .update(log_duration(actual)),
                ModelKind::Failure => self
                    .failure
                    .entry(scope.clone())
                    .or_insert_with(|| OnlineLogistic::new(z.len(), self.learning_rate))
                    .update(&z, actual),
                ModelKind::Flaky => self
                    .flaky
                    .entry(scope.clone())
                    .or_insert_with(|| OnlineLogistic::new(z.len(), self.learning_rate))
                    .update(&z, actual),
            }
            self.updated_at
                .insert(format!("{}:{scope}", kind.as_str()), ts::format(&at));
        }
        self.version += 1;
        Ok(())
    }

    /// Per-feature contributions w_i · x_i of the logistic learner answering
    /// for `project_id`, largest magnitude first. Empty for duration.
    pub fn attributions(
        &self,
        kind: ModelKind,
        project_id: u64,
        x: &FeatureVector,
    ) -> Vec<(String, f64)> {
        if kind == ModelKind::Duration {
            return Vec::new();
        }
        let (Ok(z), Some(scope)) = (self.schema.scaled(x), self.resolve_scope(kind, project_id))
        else {
            return Vec::new();
        };
        let m = &self.logistic(kind)[&scope];
        let mut out: Vec<(String, f64)> = self
            .schema
            .names()
            .map(str::to_string)
            .zip(m.contributions(&z))
            .collect();
        out.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(&b.0)));
        out
    }

    pub fn snapshots(&self) -> Vec<ModelSnapshot> {
        let created = |kind: ModelKind, scope: &str| {
            self.updated_at
                .get(&format!("{}:{scope}", kind.as_str()))
                .and_then(|s| crate::ingest::parse_timestamp(s))
                .unwrap_or_default()
        };
        let mut out = Vec::new();
        for (kind, map) in [
            (ModelKind::Failure, &self.failure),
            (ModelKind::Flaky, &self.flaky),
        ] {
            for (scope, m) in map {
                out.push(ModelSnapshot {
                    model_snapshot_id: format!("{}:{scope}:{}", kind.as_str(), m.count),
                    model_kind: kind,
                    scope: scope.clone(),
                    parameters: serde_json::to_value(m).expect("learner serializes"),
                    trained_on_count: m.count,
                    created_at: created(kind, scope),
                });
            }
        }
        for (scope, m) in &self.duration {
            out.push(ModelSnapshot {
                model_snapshot_id: format!("duration:{scope}:{}", m.count),
                model_kind: ModelKind::Duration,
                scope: scope.clone(),
                parameters: serde_json::to_value(m).expect("learner serializes"),
                trained_on_count: m.count,
                created_at: created(ModelKind::Duration, scope),
            });
        }
        out
    }
}

/// A freshly stored prediction together with what explains it.
#[derive(Debug, Clone)]
pub struct PredictionContext {
    pub record: PredictionRecord,
    pub job: BuildJob,
    pub attributions: Vec<(String, f64)>,
}

pub type PredictionHook = Arc<dyn Fn(&PredictionContext) + Send + Sync>;

/// Counts of what one event caused.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub duplicate: bool,
    pub predictions: usize,
    pub actuals: usize,
    pub updates: usize,
    pub anomalies: usize,
}

pub struct ModelService {
    store: Arc<Store>,
    clock: SharedClock,
    config: ModelsConfig,
    current: ArcSwap<ModelSet>,
    update_lock: Mutex<()>,
    hooks: RwLock<Vec<PredictionHook>>,
}

impl std::fmt::Debug for ModelService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelService")
            .field("version", &self.current.load().version)
            .finish_non_exhaustive()
    }
}

struct Work<'a> {
    set: ModelSet,
    config: &'a ModelsConfig,
    now: Timestamp,
    outcome: EventOutcome,
    fresh: Vec<(PredictionRecord, BuildJob, Vec<(String, f64)>)>,
}

impl Work<'_> {
    fn vector(&self, job: &BuildJob) -> Result<FeatureVector, SchemaMismatch> {
        self.set.schema.vector(&job.features)
    }

    /// Stores one prediction per kind that the job does not have yet.
    fn ensure_predictions(&mut self, txn: &mut Txn, job: &BuildJob) -> Result<(), ModelsError> {
        let x = self.vector(job)?;
        for kind in ModelKind::ALL {
            if txn.view().latest_prediction(job.job_id, kind).is_some() {
                continue;
            }
            let p = self.set.predict(kind, job.project_id, &x)?;
            let record = PredictionRecord {
                prediction_id: txn.next_id("prediction"),
                job_id: job.job_id,
                model_kind: kind,
                predicted_value: p.value,
                log_sigma: p.log_sigma,
                model_snapshot_id: p.snapshot_id,
                predicted_at: self.now,
                actual_value: None,
                anomaly: None,
                anomaly_score: None,
            };
            txn.push(Mutation::PutPrediction {
                record: record.clone(),
            });
            self.outcome.predictions += 1;
            let attributions = self.set.attributions(kind, job.project_id, &x);
            self.fresh.push((record, job.clone(), attributions));
        }
        Ok(())
    }

    /// Attaches the outcome, flags anomalies and trains, once per prediction.
    fn observe(
        &mut self,
        txn: &mut Txn,
        job: &BuildJob,
        kind: ModelKind,
        actual: f64,
    ) -> Result<(), ModelsError> {
        let Some(mut record) = txn.view().latest_prediction(job.job_id, kind).cloned() else {
            return Ok(());
        };
        if record.actual_value.is_some() {
            return Ok(());
        }
        let x = self.vector(job)?;
        let observations = record
            .model_snapshot_id
            .rsplit(':')
            .next()
            .and_then(|n| n.parse().ok())
            .unwrap_or(0);
        record.actual_value = Some(actual);
        let verdict =
            anomaly::detect(&record, observations, &self.config.anomaly).expect("actual just set");
        record.anomaly = Some(verdict.anomaly);
        record.anomaly_score = Some(verdict.score);
        txn.push(Mutation::PutPrediction { record });
        self.set
            .update(kind, job.project_id, &x, actual, self.now)?;
        self.outcome.actuals += 1;
        self.outcome.updates += 1;
        self.outcome.anomalies += verdict.anomaly as usize;
        Ok(())
    }

    fn process_job(&mut self, txn: &mut Txn, job: &BuildJob) -> Result<(), ModelsError> {
        self.ensure_predictions(txn, job)?;
        if job.status.is_completed() {
            let failed = (job.status == JobStatus::Failed) as u8 as f64;
            self.observe(txn, job, ModelKind::Failure, failed)?;
            if let Some(d) = job.duration {
                self.observe(txn, job, ModelKind::Duration, d)?;
            }
        }
        // Resolve failed attempts of the retry group whose next completed
        // attempt is now known.
        let group: Vec<BuildJob> = {
            let mut g: Vec<BuildJob> = txn
                .view()
                .pipeline_jobs(job.project_id, job.pipeline_id)
                .filter(|j| j.name == job.name)
                .cloned()
                .collect();
            g.sort_by_key(|j| (j.created_at, j.job_id));
            g
        };
        for (i, failed) in group.iter().enumerate() {
            if failed.status != JobStatus::Failed {
                continue;
            }
            let Some(next) = group[i + 1..].iter().find(|j| j.status.is_completed()) else {
                continue;
            };
            if txn
                .view()
                .latest_prediction(failed.job_id, ModelKind::Flaky)
                .is_none()
            {
                self.ensure_predictions(txn, failed)?;
            }
            let label = (next.status == JobStatus::Success) as u8 as f64;
            self.observe(txn, failed, ModelKind::Flaky, label)?;
        }
        Ok(())
    }
}

impl ModelService {
    /// Loads the persisted model state, if any.
    pub fn new(
        store: Arc<Store>,
        clock: SharedClock,
        config: ModelsConfig,
    ) -> Result<Self, ModelsError> {
        let set = store
            .get_doc::<ModelSet>(STATE, "current")?
            .unwrap_or_else(|| ModelSet::new(&config));
        Ok(ModelService {
            store,
            clock,
            config,
            current: ArcSwap::from_pointee(set),
            update_lock: Mutex::new(()),
            hooks: RwLock::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &ModelsConfig {
        &self.config
    }

    /// The published model set; never changes under the caller.
    pub fn current(&self) -> Arc<ModelSet> {
        self.current.load_full()
    }

    pub fn schema(&self) -> FeatureSchema {
        self.current.load().schema.clone()
    }

    /// Registers a callback run after each newly stored prediction.
    pub fn on_prediction(&self, hook: PredictionHook) {
        self.hooks.write().push(hook);
    }

    /// Processes one integration event: predicts for new jobs, attaches
    /// outcomes to open predictions, flags anomalies and trains. Processing
    /// the same event id twice has no further effect.
    pub fn on_data_integrated(
        &self,
        event: &DataIntegratedEvent,
    ) -> Result<EventOutcome, ModelsError> {
        let _serial = self.update_lock.lock();
        let base = self.current.load_full();
        let mut work = Work {
            set: (*base).clone(),
            config: &self.config,
            now: self.clock.now(),
            outcome: EventOutcome::default(),
            fresh: Vec::new(),
        };
        self.store.transact(|txn| {
            if txn.view().doc(EVENTS, &event.event_id).is_some() {
                work.outcome.duplicate = true;
                return Ok(());
            }
            let snap: Arc<Snapshot> = Arc::new(txn.view().clone());
            let mut jobs: Vec<&BuildJob> = event
                .job_ids
                .iter()
                .filter_map(|id| snap.job(*id))
                .collect();
            jobs.sort_by_key(|j| (j.created_at, j.job_id));
            for job in jobs {
                // A job without a full feature vector cannot be scored.
                if let Err(e) = work.process_job(txn, job) {
                    match e {
                        ModelsError::Schema(s) => {
                            tracing::warn!(job_id = job.job_id, error = %s, "job skipped")
                        }
                        ModelsError::Store(s) => return Err(s),
                    }
                }
            }
            txn.put_doc(EVENTS, &event.event_id, &ts::format(&work.now))?;
            if work.set != *base {
                txn.put_doc(STATE, "current", &work.set)?;
            }
            Ok(())
        })?;
        let Work {
            set,
            outcome,
            fresh,
            ..
        } = work;
        if set != *base {
            self.current.store(Arc::new(set));
        }
        let hooks = self.hooks.read().clone();
        if hooks.is_empty() {
            return Ok(outcome);
        }
        let mut contexts = fresh;
        // A failure that arrives after its prediction is re-announced with
        // the job's final state, so consumers can act on it.
        let snap = self.store.snapshot();
        let current = self.current();
        for id in &event.job_ids {
            let Some(job) = snap.job(*id) else { continue };
            if job.status != JobStatus::Failed
                || contexts
                    .iter()
                    .any(|(r, _, _)| r.job_id == job.job_id && r.model_kind == ModelKind::Flaky)
            {
                continue;
            }
            if let Some(record) = snap.latest_prediction(job.job_id, ModelKind::Flaky) {
                let attributions = current
                    .schema
                    .vector(&job.features)
                    .map(|x| current.attributions(ModelKind::Flaky, job.project_id, &x))
                    .unwrap_or_default();
                contexts.push((record.clone(), job.clone(), attributions));
            }
        }
        for (record, job, attributions) in contexts {
            // Hooks see the job as stored after this event.
            let job = snap.job(job.job_id).cloned().unwrap_or(job);
            let ctx = PredictionContext {
                record,
                job,
                attributions,
            };
            for h in &hooks {
                h(&ctx);
            }
        }
        Ok(outcome)
    }

    /// Consumes a bus subscription until `stop` fires. Failures are logged
    /// and the event is left un-acked for redelivery.
    pub fn run(&self, mut sub: Subscription, stop: Receiver<()>) {
        loop {
            if stop.try_recv().is_ok()
                || matches!(
                    stop.try_recv(),
                    Err(crossbeam_channel::TryRecvError::Disconnected)
                )
            {
                return;
            }
            let Some(d) = sub.next_timeout(Duration::from_millis(50)) else {
                continue;
            };
            match self.on_data_integrated(&d.event) {
                Ok(_) => {
                    if let Err(e) = sub.ack(d.seq) {
                        tracing::warn!(error = %e, "ack failed");
                    }
                }
                Err(e) => {
                    tracing::error!(error = %e, event = %d.event.event_id, "model update failed");
                    sub.rewind();
                    std::thread::sleep(Duration::from_millis(200));
                }
            }
        }
    }

    /// Predictions flagged anomalous whose job finished in `[from, to)`.
    pub fn anomalies(
        &self,
        from: Option<Timestamp>,
        to: Option<Timestamp>,
    ) -> Vec<PredictionRecord> {
        let snap = self.store.snapshot();
        let mut out: Vec<PredictionRecord> = snap
            .predictions()
            .filter(|p| p.anomaly == Some(true))
            .filter(|p| {
                let at = snap
                    .job(p.job_id)
                    .and_then(|j| j.finished_at)
                    .unwrap_or(p.predicted_at);
                from.is_none_or(|f| at >= f) && to.is_none_or(|t| at < t)
            })
            .cloned()
            .collect();
        out.sort_by_key(|p| p.prediction_id);
        out
    }

    /// Event ids already applied.
    pub fn processed_events(&self) -> BTreeSet<String> {
        self.store
            .snapshot()
            .docs(EVENTS)
            .into_iter()
            .map(|(k, _)| k.clone())
            .collect()
    }
}
