//! Persistence and query layer.
//!
//! State is a set of persistent (structurally shared) maps published through
//! an atomic pointer: readers take a [`Snapshot`] and never block on the
//! writer. All mutations pass through one writer lock, are appended to a
//! [`Journal`] as a single commit and only then become visible.

mod journal;
mod query;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use arc_swap::ArcSwap;
use im::{OrdMap, OrdSet};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use journal::{Commit, FileJournal, Journal, MemoryJournal, Mutation};
pub use query::{JobPage, JobQuery, SortOrder, DEFAULT_LIMIT, MAX_LIMIT};

use crate::model::{
    validate_job, BuildJob, ModelKind, PredictionRecord, Project, Timestamp, Violation,
};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("validation failed for jobs {job_ids:?}")]
    Validation {
        job_ids: Vec<u64>,
        violations: Vec<(u64, Vec<Violation>)>,
    },
    #[error("storage unavailable: {0}")]
    Unavailable(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("corrupt record: {0}")]
    Corrupt(String),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsertSummary {
    pub inserted: usize,
    pub updated: usize,
    pub ignored: usize,
}

impl UpsertSummary {
    pub fn stored(&self) -> usize {
        self.inserted + self.updated
    }
}

impl std::ops::AddAssign for UpsertSummary {
    fn add_assign(&mut self, rhs: Self) {
        self.inserted += rhs.inserted;
        self.updated += rhs.updated;
        self.ignored += rhs.ignored;
    }
}

type GroupKey = (u64, String);
type OrderKey = (Timestamp, u64);

/// An immutable, committed view of the store.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    version: u64,
    jobs: OrdMap<u64, BuildJob>,
    by_group: OrdMap<GroupKey, OrdSet<OrderKey>>,
    by_project: OrdMap<u64, OrdSet<OrderKey>>,
    by_pipeline: OrdMap<(u64, u64), OrdSet<u64>>,
    projects: OrdMap<u64, Project>,
    predictions: OrdMap<u64, PredictionRecord>,
    latest_prediction: OrdMap<(u64, ModelKind), u64>,
    docs: OrdMap<String, OrdMap<String, serde_json::Value>>,
    sequences: OrdMap<String, u64>,
}

impl Snapshot {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn job(&self, job_id: u64) -> Option<&BuildJob> {
        self.jobs.get(&job_id)
    }

    pub fn job_count(&self) -> usize {
        self.jobs.len()
    }

    /// All jobs in job_id order.
    pub fn jobs(&self) -> impl Iterator<Item = &BuildJob> + '_ {
        self.jobs.values()
    }

    /// Jobs of one project ordered by (created_at, job_id).
    pub fn project_jobs(&self, project_id: u64) -> impl DoubleEndedIterator<Item = &BuildJob> + '_ {
        self.by_project
            .get(&project_id)
            .into_iter()
            .flat_map(|set| set.iter())
            .filter_map(move |(_, id)| self.jobs.get(id))
    }

    /// Jobs sharing (project, name), ordered by (created_at, job_id).
    pub fn group_jobs(
        &self,
        project_id: u64,
        name: &str,
    ) -> impl DoubleEndedIterator<Item = &BuildJob> + '_ {
        self.by_group
            .get(&(project_id, name.to_string()))
            .into_iter()
            .flat_map(|set| set.iter())
            .filter_map(move |(_, id)| self.jobs.get(id))
    }

    /// Jobs of the (project, name) group ordered after `job` by (created_at, job_id).
    pub fn following_in_group<'a>(
        &'a self,
        job: &BuildJob,
    ) -> impl Iterator<Item = &'a BuildJob> + 'a {
        use std::ops::Bound::{Excluded, Unbounded};
        let key = (job.created_at, job.job_id);
        self.by_group
            .get(&(job.project_id, job.name.clone()))
            .into_iter()
            .flat_map(move |set| set.range((Excluded(key), Unbounded)))
            .filter_map(move |(_, id)| self.jobs.get(id))
    }

    /// Jobs of one pipeline in job_id order.
    pub fn pipeline_jobs(
        &self,
        project_id: u64,
        pipeline_id: u64,
    ) -> impl Iterator<Item = &BuildJob> + '_ {
        self.by_pipeline
            .get(&(project_id, pipeline_id))
            .into_iter()
            .flat_map(|set| set.iter())
            .filter_map(move |id| self.jobs.get(id))
    }

    /// Up to `n` jobs in the (project, name) group created strictly before `job`.
    pub fn preceding_in_group(&self, job: &BuildJob, n: usize) -> Vec<&BuildJob> {
        let Some(set) = self.by_group.get(&(job.project_id, job.name.clone())) else {
            return Vec::new();
        };
        set.range(..(job.created_at, job.job_id))
            .rev()
            .filter(|(t, _)| *t < job.created_at)
            .take(n)
            .filter_map(|(_, id)| self.jobs.get(id))
            .collect()
    }

    pub fn project_ids(&self) -> Vec<u64> {
        self.by_project.keys().copied().collect()
    }

    pub fn project(&self, project_id: u64) -> Option<&Project> {
        self.projects.get(&project_id)
    }

    pub fn projects(&self) -> impl Iterator<Item = &Project> + '_ {
        self.projects.values()
    }

    pub fn query_jobs(&self, q: &JobQuery) -> Result<JobPage> {
        q.validate().map_err(StoreError::InvalidQuery)?;
        let mut hits: Vec<&BuildJob> = match &q.project_ids {
            Some(ids) => {
                let ids: BTreeSet<u64> = ids.iter().copied().collect();
                ids.into_iter()
                    .flat_map(|p| self.project_jobs(p))
                    .filter(|j| q.matches(j))
                    .collect()
            }
            None => self.jobs.values().filter(|j| q.matches(j)).collect(),
        };
        hits.sort_by_key(|j| (j.created_at, j.job_id));
        if q.sort == SortOrder::Desc {
            hits.reverse();
        }
        let total_count = hits.len();
        let jobs = hits
            .into_iter()
            .skip(q.offset)
            .take(q.limit)
            .cloned()
            .collect();
        Ok(JobPage {
            jobs,
            total_count,
            offset: q.offset,
            limit: q.limit,
        })
    }

    pub fn prediction(&self, prediction_id: u64) -> Option<&PredictionRecord> {
        self.predictions.get(&prediction_id)
    }

    /// The most recent prediction of `kind` made for `job_id`.
    pub fn latest_prediction(&self, job_id: u64, kind: ModelKind) -> Option<&PredictionRecord> {
        self.latest_prediction
            .get(&(job_id, kind))
            .and_then(|id| self.predictions.get(id))
    }

    pub fn predictions_for_job(&self, job_id: u64) -> Vec<&PredictionRecord> {
        self.predictions
            .values()
            .filter(|p| p.job_id == job_id)
            .collect()
    }

    pub fn predictions(&self) -> impl Iterator<Item = &PredictionRecord> + '_ {
        self.predictions.values()
    }

    pub fn doc(&self, collection: &str, key: &str) -> Option<&serde_json::Value> {
        self.docs.get(collection).and_then(|c| c.get(key))
    }

    pub fn doc_as<T: DeserializeOwned>(&self, collection: &str, key: &str) -> Result<Option<T>> {
        self.doc(collection, key)
            .map(|v| {
                serde_json::from_value(v.clone()).map_err(|e| StoreError::Corrupt(e.to_string()))
            })
            .transpose()
    }

    /// Documents of one collection in key order.
    pub fn docs(&self, collection: &str) -> Vec<(&String, &serde_json::Value)> {
        self.docs
            .get(collection)
            .map(|c| c.iter().collect())
            .unwrap_or_default()
    }

    pub fn sequence(&self, name: &str) -> u64 {
        self.sequences.get(name).copied().unwrap_or(0)
    }

    fn apply(&mut self, m: &Mutation) {
        match m {
            Mutation::PutJob { job } => {
                if let Some(old) = self.jobs.get(&job.job_id).cloned() {
                    self.unindex(&old);
                }
                self.index(job);
                self.jobs.insert(job.job_id, job.clone());
            }
            Mutation::RemoveJob { job_id } => {
                if let Some(old) = self.jobs.remove(job_id) {
                    self.unindex(&old);
                }
            }
            Mutation::PutProject { project } => {
                self.projects.insert(project.project_id, project.clone());
            }
            Mutation::PutPrediction { record } => {
                let key = (record.job_id, record.model_kind);
                let newer = self
                    .latest_prediction
                    .get(&key)
                    .is_none_or(|cur| *cur <= record.prediction_id);
                if newer {
                    self.latest_prediction.insert(key, record.prediction_id);
                }
                self.predictions
                    .insert(record.prediction_id, record.clone());
            }
            Mutation::PutDoc {
                collection,
                key,
                value,
            } => {
                let mut coll = self.docs.get(collection).cloned().unwrap_or_default();
                coll.insert(key.clone(), value.clone());
                self.docs.insert(collection.clone(), coll);
            }
            Mutation::DeleteDoc { collection, key } => {
                if let Some(mut coll) = self.docs.get(collection).cloned() {
                    coll.remove(key);
                    self.docs.insert(collection.clone(), coll);
                }
            }
            Mutation::Sequence { name, value } => {
                self.sequences.insert(name.clone(), *value);
            }
        }
    }

    fn index(&mut self, job: &BuildJob) {
        let key = (job.created_at, job.job_id);
        let gk = (job.project_id, job.name.clone());
        let mut g = self.by_group.get(&gk).cloned().unwrap_or_default();
        g.insert(key);
        self.by_group.insert(gk, g);
        let mut p = self
            .by_project
            .get(&job.project_id)
            .cloned()
            .unwrap_or_default();
        p.insert(key);
        self.by_project.insert(job.project_id, p);
        let pk = (job.project_id, job.pipeline_id);
        let mut pl = self.by_pipeline.get(&pk).cloned().unwrap_or_default();
        pl.insert(job.job_id);
        self.by_pipeline.insert(pk, pl);
    }

    fn unindex(&mut self, job: &BuildJob) {
        let key = (job.created_at, job.job_id);
        let gk = (job.project_id, job.name.clone());
        if let Some(mut g) = self.by_group.get(&gk).cloned() {
            g.remove(&key);
            if g.is_empty() {
                self.by_group.remove(&gk);
            } else {
                self.by_group.insert(gk, g);
            }
        }
        if let Some(mut p) = self.by_project.get(&job.project_id).cloned() {
            p.remove(&key);
            if p.is_empty() {
                self.by_project.remove(&job.project_id);
            } else {
                self.by_project.insert(job.project_id, p);
            }
        }
        let pk = (job.project_id, job.pipeline_id);
        if let Some(mut pl) = self.by_pipeline.get(&pk).cloned() {
            pl.remove(&job.job_id);
            if pl.is_empty() {
                self.by_pipeline.remove(&pk);
            } else {
                self.by_pipeline.insert(pk, pl);
            }
        }
    }
}

/// An open write transaction. Mutations apply to a private copy of the
/// state and are published together on commit.
pub struct Txn {
    state: Snapshot,
    log: Vec<Mutation>,
}

impl Txn {
    pub fn view(&self) -> &Snapshot {
        &self.state
    }

    pub fn push(&mut self, m: Mutation) {
        self.state.apply(&m);
        self.log.push(m);
    }

    pub fn put_job(&mut self, job: BuildJob) {
        self.push(Mutation::PutJob { job });
    }

    pub fn put_doc<T: Serialize>(&mut self, collection: &str, key: &str, value: &T) -> Result<()> {
        let value = serde_json::to_value(value).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        self.push(Mutation::PutDoc {
            collection: collection.to_string(),
            key: key.to_string(),
            value,
        });
        Ok(())
    }

    pub fn delete_doc(&mut self, collection: &str, key: &str) {
        self.push(Mutation::DeleteDoc {
            collection: collection.to_string(),
            key: key.to_string(),
        });
    }

    /// Returns the next value of a named monotonically increasing sequence.
    pub fn next_id(&mut self, name: &str) -> u64 {
        let value = self.state.sequence(name) + 1;
        self.push(Mutation::Sequence {
            name: name.to_string(),
            value,
        });
        value
    }
}

pub struct Store {
    current: ArcSwap<Snapshot>,
    writer: Mutex<Box<dyn Journal>>,
    retention_per_project: Option<usize>,
    unavailable: std::sync::atomic::AtomicBool,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("version", &self.snapshot().version)
            .field("retention_per_project", &self.retention_per_project)
            .finish()
    }
}

impl Store {
    pub fn in_memory() -> Self {
        Store::with_journal(Box::new(MemoryJournal)).expect("memory journal never fails")
    }

    /// Opens (or creates) an on-disk store under `dir`, replaying its journal.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let journal =
            FileJournal::open(dir, false).map_err(|e| StoreError::Unavailable(e.to_string()))?;
        Store::with_journal(Box::new(journal))
    }

    pub fn with_journal(mut journal: Box<dyn Journal>) -> Result<Self> {
        let commits = journal
            .load()
            .map_err(|e| StoreError::Unavailable(e.to_string()))?;
        let mut state = Snapshot::default();
        for c in &commits {
            for m in &c.mutations {
                state.apply(m);
            }
            state.version = c.version;
        }
        Ok(Store {
            current: ArcSwap::from_pointee(state),
            writer: Mutex::new(journal),
            retention_per_project: None,
            unavailable: Default::default(),
        })
    }

    /// Keep at most `cap` newest jobs (by created_at) per project.
    pub fn with_retention(mut self, cap: Option<usize>) -> Self {
        self.retention_per_project = cap;
        self
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.load_full()
    }

    /// Fault injection: while set, every write fails with `Unavailable`.
    pub fn set_unavailable(&self, down: bool) {
        self.unavailable
            .store(down, std::sync::atomic::Ordering::SeqCst);
    }

    pub fn is_available(&self) -> bool {
        !self.unavailable.load(std::sync::atomic::Ordering::SeqCst)
    }

    /// Runs `f` as one atomic, durable transaction.
    pub fn transact<R>(&self, f: impl FnOnce(&mut Txn) -> Result<R>) -> Result<R> {
        let mut journal = self.writer.lock();
        if self.unavailable.load(std::sync::atomic::Ordering::SeqCst) {
            return Err(StoreError::Unavailable("store marked unavailable".into()));
        }
        let base = self.current.load_full();
        let mut txn = Txn {
            state: (*base).clone(),
            log: Vec::new(),
        };
        let out = f(&mut txn)?;
        if txn.log.is_empty() {
            return Ok(out);
        }
        txn.state.version = base.version + 1;
        let commit = Commit {
            version: txn.state.version,
            mutations: txn.log,
        };
        journal
            .append(&commit)
            .map_err(|e| StoreError::Unavailable(e.to_string()))?;
        self.current.store(Arc::new(txn.state));
        Ok(out)
    }

    /// Idempotent insert-or-update keyed on job_id.
    ///
    /// A stored record is replaced only when the incoming one differs and
    /// either has higher status precedence, equal non-terminal precedence, or
    /// equal terminal precedence with a newer finished_at. Derived fields
    /// (flaky, features) absent from the incoming record are carried over.
    pub fn upsert_jobs(&self, jobs: Vec<BuildJob>) -> Result<UpsertSummary> {
        let invalid: Vec<(u64, Vec<Violation>)> = jobs
            .iter()
            .map(|j| (j.job_id, validate_job(j)))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        if !invalid.is_empty() {
            return Err(StoreError::Validation {
                job_ids: invalid.iter().map(|(id, _)| *id).collect(),
                violations: invalid,
            });
        }
        let cap = self.retention_per_project;
        self.transact(|txn| {
            let mut summary = UpsertSummary::default();
            let mut touched = BTreeSet::new();
            for mut job in jobs {
                let verdict = match txn.view().job(job.job_id) {
                    None => Some(true),
                    Some(old) => {
                        if job.flaky.is_none() {
                            job.flaky = old.flaky;
                        }
                        if job.features.is_empty() {
                            job.features = old.features.clone();
                        }
                        if job.flaky.is_some() && job.status != crate::model::JobStatus::Failed {
                            job.flaky = None;
                        }
                        supersedes(old, &job).then_some(false)
                    }
                };
                match verdict {
                    Some(true) => summary.inserted += 1,
                    Some(false) => summary.updated += 1,
                    None => {
                        summary.ignored += 1;
                        continue;
                    }
                }
                touched.insert(job.project_id);
                txn.put_job(job);
            }
            if let Some(cap) = cap {
                for project in touched {
                    let excess: Vec<u64> = {
                        let jobs: Vec<u64> =
                            txn.view().project_jobs(project).map(|j| j.job_id).collect();
                        let n = jobs.len().saturating_sub(cap);
                        jobs.into_iter().take(n).collect()
                    };
                    for job_id in excess {
                        txn.push(Mutation::RemoveJob { job_id });
                    }
                }
            }
            Ok(summary)
        })
    }

    pub fn query_jobs(&self, q: &JobQuery) -> Result<JobPage> {
        self.snapshot().query_jobs(q)
    }

    pub fn get_job(&self, job_id: u64) -> Option<BuildJob> {
        self.snapshot().job(job_id).cloned()
    }

    pub fn put_projects(&self, projects: Vec<Project>) -> Result<()> {
        self.transact(|txn| {
            for project in projects {
                if txn.view().project(project.project_id) != Some(&project) {
                    txn.push(Mutation::PutProject { project });
                }
            }
            Ok(())
        })
    }

    /// Stores prediction records; records with `prediction_id == 0` get a
    /// fresh id. Returns the stored records.
    pub fn store_predictions(
        &self,
        records: Vec<PredictionRecord>,
    ) -> Result<Vec<PredictionRecord>> {
        self.transact(|txn| {
            let mut out = Vec::with_capacity(records.len());
            for mut r in records {
                if r.prediction_id == 0 {
                    r.prediction_id = txn.next_id("prediction");
                }
                txn.push(Mutation::PutPrediction { record: r.clone() });
                out.push(r);
            }
            Ok(out)
        })
    }

    /// Attaches the observed outcome to the latest prediction of `kind` for
    /// `job_id`. Re-attaching the same value is a no-op.
    pub fn attach_actual(
        &self,
        job_id: u64,
        kind: ModelKind,
        actual: f64,
    ) -> Result<PredictionRecord> {
        self.transact(|txn| {
            let Some(record) = txn.view().latest_prediction(job_id, kind).cloned() else {
                return Err(StoreError::NotFound(format!(
                    "{} prediction for job {job_id}",
                    kind.as_str()
                )));
            };
            if record.actual_value == Some(actual) {
                return Ok(record);
            }
            let mut record = record;
            record.actual_value = Some(actual);
            record.anomaly = None;
            record.anomaly_score = None;
            txn.push(Mutation::PutPrediction {
                record: record.clone(),
            });
            Ok(record)
        })
    }

    pub fn set_anomaly(
        &self,
        prediction_id: u64,
        anomaly: bool,
        score: f64,
    ) -> Result<PredictionRecord> {
        self.transact(|txn| {
            let Some(mut record) = txn.view().prediction(prediction_id).cloned() else {
                return Err(StoreError::NotFound(format!("prediction {prediction_id}")));
            };
            if record.actual_value.is_none() {
                return Err(StoreError::InvalidQuery(format!(
                    "prediction {prediction_id} has no actual value"
                )));
            }
            if record.anomaly == Some(anomaly) && record.anomaly_score == Some(score) {
                return Ok(record);
            }
            record.anomaly = Some(anomaly);
            record.anomaly_score = Some(score);
            txn.push(Mutation::PutPrediction {
                record: record.clone(),
            });
            Ok(record)
        })
    }

    /// Sets derived fields without touching source fields.
    pub fn set_derived(&self, updates: Vec<DerivedUpdate>) -> Result<()> {
        self.transact(|txn| {
            for u in updates {
                let Some(mut job) = txn.view().job(u.job_id).cloned() else {
                    continue;
                };
                let before = job.clone();
                if let Some(flaky) = u.flaky {
                    job.flaky = flaky;
                }
                if let Some(features) = u.features {
                    job.features = features;
                }
                if job != before {
                    txn.put_job(job);
                }
            }
            Ok(())
        })
    }

    pub fn put_doc<T: Serialize>(&self, collection: &str, key: &str, value: &T) -> Result<()> {
        self.transact(|txn| txn.put_doc(collection, key, value))
    }

    pub fn delete_doc(&self, collection: &str, key: &str) -> Result<()> {
        self.transact(|txn| {
            if txn.view().doc(collection, key).is_some() {
                txn.delete_doc(collection, key);
            }
            Ok(())
        })
    }

    pub fn get_doc<T: DeserializeOwned>(&self, collection: &str, key: &str) -> Result<Option<T>> {
        self.snapshot().doc_as(collection, key)
    }

    pub fn next_id(&self, name: &str) -> Result<u64> {
        self.transact(|txn| Ok(txn.next_id(name)))
    }

    /// Writes every job as one canonical JSON line, ordered by job_id.
    pub fn export_jobs(&self, mut out: impl Write) -> std::io::Result<usize> {
        let snap = self.snapshot();
        let mut n = 0;
        for job in snap.jobs() {
            serde_json::to_writer(&mut out, job)?;
            out.write_all(b"\n")?;
            n += 1;
        }
        out.flush()?;
        Ok(n)
    }

    /// Reads canonical job lines and upserts them in batches.
    pub fn import_jobs(&self, input: impl BufRead) -> Result<UpsertSummary> {
        let mut summary = UpsertSummary::default();
        let mut batch = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| StoreError::Unavailable(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let job: BuildJob =
                serde_json::from_str(&line).map_err(|e| StoreError::Corrupt(e.to_string()))?;
            batch.push(job);
            if batch.len() == 500 {
                summary += self.upsert_jobs(std::mem::take(&mut batch))?;
            }
        }
        if !batch.is_empty() {
            summary += self.upsert_jobs(batch)?;
        }
        Ok(summary)
    }

    /// Rewrites the journal as a single commit holding the current state.
    pub fn compact(&self) -> Result<()> {
        let mut journal = self.writer.lock();
        let snap = self.current.load_full();
        let mut mutations = Vec::new();
        mutations.extend(
            snap.projects
                .values()
                .map(|p| Mutation::PutProject { project: p.clone() }),
        );
        mutations.extend(
            snap.jobs
                .values()
                .map(|j| Mutation::PutJob { job: j.clone() }),
        );
        mutations.extend(
            snap.predictions
                .values()
                .map(|r| Mutation::PutPrediction { record: r.clone() }),
        );
        for (collection, docs) in snap.docs.iter() {
            for (key, value) in docs.iter() {
                mutations.push(Mutation::PutDoc {
                    collection: collection.clone(),
                    key: key.clone(),
                    value: value.clone(),
                });
            }
        }
        for (name, value) in snap.sequences.iter() {
            mutations.push(Mutation::Sequence {
                name: name.clone(),
                value: *value,
            });
        }
        let commit = Commit {
            version: snap.version,
            mutations,
        };
        journal
            .rewrite(std::slice::from_ref(&commit))
            .map_err(|e| StoreError::Unavailable(e.to_string()))
    }
}

/// A derived-field update; `None` leaves the field unchanged.
#[derive(Debug, Clone, Default)]
pub struct DerivedUpdate {
    pub job_id: u64,
    pub flaky: Option<Option<bool>>,
    pub features: Option<BTreeMap<String, f64>>,
}

fn supersedes(old: &BuildJob, new: &BuildJob) -> bool {
    if old == new {
        return false;
    }
    let (po, pn) = (old.status.precedence(), new.status.precedence());
    if pn != po {
        return pn > po;
    }
    if old.same_source_fields(new) {
        // Only derived fields differ.
        return true;
    }
    if !new.status.is_terminal() {
        return new.updated_at() >= old.updated_at();
    }
    match (old.finished_at, new.finished_at) {
        (Some(a), Some(b)) => b > a,
        (None, Some(_)) => true,
        _ => false,
    }
}
