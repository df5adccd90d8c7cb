//! Improvement actions proposed from predictions and alerts, applied to
//! the actual twin after approval.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::adapters::ActualTwinWriter;
use crate::clock::SharedClock;
use crate::metrics::alerts::AlertFiring;
use crate::model::{
    ts, ActionKind, ActionStatus, ActionTarget, ImprovementAction, JobStatus, MetricName,
    ModelKind, Scope, Timestamp,
};
use crate::models::PredictionContext;
use crate::store::{Store, StoreError};

const ACTIONS: &str = "improve.actions";
const COOLDOWN: &str = "improve.cooldown";
const LEDGER: &str = "improve.ledger";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImproveConfig {
    pub long_build_seconds: f64,
    pub failure_threshold: f64,
    /// A failed job whose flaky probability exceeds this is worth a retry.
    pub flaky_threshold: f64,
    pub cooldown_seconds: i64,
    /// Kinds approved without a human.
    pub auto_approve: BTreeSet<ActionKind>,
    pub cache_variable: String,
    pub advisory_dir: String,
}

impl Default for ImproveConfig {
    fn default() -> Self {
        ImproveConfig {
            long_build_seconds: 600.0,
            failure_threshold: 0.8,
            flaky_threshold: 0.5,
            cooldown_seconds: 3600,
            auto_approve: BTreeSet::new(),
            cache_variable: "CBDT_CACHE_ENABLED".into(),
            advisory_dir: ".cbdt/advisories".into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ImproveError {
    #[error("no action {0}")]
    NotFound(u64),
    #[error("illegal transition {from:?} -> {to:?}")]
    IllegalTransition {
        from: ActionStatus,
        to: ActionStatus,
    },
    #[error("writer rejected action {}: {}", .action.action_id, .action.error.as_deref().unwrap_or(""))]
    WriterRejected { action: Box<ImprovementAction> },
    #[error("no writer configured")]
    NoWriter,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone)]
pub enum Trigger {
    Prediction(PredictionContext),
    Alert(AlertFiring),
}

fn key(id: u64) -> String {
    format!("{id:012}")
}

fn cooldown_key(kind: ActionKind, target: &ActionTarget) -> String {
    let kind = serde_json::to_value(kind).expect("kind serializes");
    match target.job_id {
        Some(j) => format!(
            "{}:{}:{j}",
            kind.as_str().unwrap_or_default(),
            target.project_id
        ),
        None => format!(
            "{}:{}",
            kind.as_str().unwrap_or_default(),
            target.project_id
        ),
    }
}

/// Ledger entry recording that an action reached the writer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LedgerEntry {
    #[serde(with = "ts")]
    at: Timestamp,
    response_id: Option<String>,
    error: Option<String>,
}

type Candidate = (ActionKind, ActionTarget, BTreeMap<String, String>);

pub struct ImproveService {
    store: Arc<Store>,
    clock: SharedClock,
    config: ImproveConfig,
    writer: Option<Arc<dyn ActualTwinWriter>>,
    project_locks: Mutex<HashMap<u64, Arc<Mutex<()>>>>,
}

impl std::fmt::Debug for ImproveService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImproveService")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl ImproveService {
    pub fn new(
        store: Arc<Store>,
        clock: SharedClock,
        config: ImproveConfig,
        writer: Option<Arc<dyn ActualTwinWriter>>,
    ) -> Self {
        ImproveService {
            store,
            clock,
            config,
            writer,
            project_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &ImproveConfig {
        &self.config
    }

    fn candidates(&self, trigger: &Trigger) -> Vec<Candidate> {
        let cfg = &self.config;
        let mut out = Vec::new();
        match trigger {
            Trigger::Prediction(ctx) => {
                let r = &ctx.record;
                let project = ctx.job.project_id;
                match r.model_kind {
                    ModelKind::Duration if r.predicted_value > cfg.long_build_seconds => {
                        let payload = BTreeMap::from([
                            ("variable".to_string(), cfg.cache_variable.clone()),
                            ("value".to_string(), "true".to_string()),
                            (
                                "reason".to_string(),
                                format!("predicted duration {:.1} s", r.predicted_value),
                            ),
                        ]);
                        out.push((
                            ActionKind::EnableCache,
                            ActionTarget {
                                project_id: project,
                                job_id: None,
                            },
                            payload,
                        ));
                    }
                    ModelKind::Failure if r.predicted_value > cfg.failure_threshold => {
                        let top: Vec<String> = ctx
                            .attributions
                            .iter()
                            .take(3)
                            .map(|(name, w)| format!("{name}={w:.4}"))
                            .collect();
                        let payload = BTreeMap::from([
                            (
                                "probability".to_string(),
                                format!("{:.4}", r.predicted_value),
                            ),
                            ("features".to_string(), top.join(",")),
                            (
                                "path".to_string(),
                                format!("{}/job-{}.md", cfg.advisory_dir, r.job_id),
                            ),
                        ]);
                        out.push((
                            ActionKind::OpenAdvisory,
                            ActionTarget {
                                project_id: project,
                                job_id: Some(r.job_id),
                            },
                            payload,
                        ));
                    }
                    ModelKind::Flaky
                        if ctx.job.status == JobStatus::Failed
                            && r.predicted_value > cfg.flaky_threshold =>
                    {
                        let snap = self.store.snapshot();
                        let retried = snap
                            .following_in_group(&ctx.job)
                            .any(|j| j.pipeline_id == ctx.job.pipeline_id);
                        if !retried {
                            let payload = BTreeMap::from([(
                                "probability".to_string(),
                                format!("{:.4}", r.predicted_value),
                            )]);
                            out.push((
                                ActionKind::RetryJob,
                                ActionTarget {
                                    project_id: project,
                                    job_id: Some(r.job_id),
                                },
                                payload,
                            ));
                        }
                    }
                    _ => {}
                }
            }
            Trigger::Alert(firing) => {
                let Scope::Projects(ids) = &firing.snapshot.scope else {
                    return out;
                };
                let metric = self
                    .store
                    .snapshot()
                    .doc("alerts.rules", &firing.rule_id)
                    .and_then(|v| v.get("metric").cloned())
                    .and_then(|m| serde_json::from_value::<MetricName>(m).ok());
                for &project in ids {
                    let target = ActionTarget {
                        project_id: project,
                        job_id: None,
                    };
                    match metric {
                        Some(MetricName::MeanDuration) => {
                            let payload = BTreeMap::from([
                                ("variable".to_string(), cfg.cache_variable.clone()),
                                ("value".to_string(), "true".to_string()),
                                ("reason".to_string(), format!("alert {}", firing.rule_id)),
                            ]);
                            out.push((ActionKind::EnableCache, target, payload));
                        }
                        Some(MetricName::FailureRatio | MetricName::FlakyFailureRatio) => {
                            let window = ts::format(&firing.snapshot.window_start);
                            let payload = BTreeMap::from([
                                ("alert".to_string(), firing.rule_id.clone()),
                                ("window_start".to_string(), window),
                                (
                                    "path".to_string(),
                                    format!("{}/alert-{}.md", cfg.advisory_dir, firing.rule_id),
                                ),
                            ]);
                            out.push((ActionKind::OpenAdvisory, target, payload));
                        }
                        _ => {}
                    }
                }
            }
        }
        out
    }

    /// Records the actions the trigger calls for, minus those suppressed by
    /// cooldown. Auto-approved kinds are applied right away when a writer is
    /// configured.
    pub fn propose(&self, trigger: &Trigger) -> Result<Vec<ImprovementAction>, ImproveError> {
        let candidates = self.candidates(trigger);
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let now = self.clock.now();
        let cooldown = chrono::Duration::seconds(self.config.cooldown_seconds);
        let created = self.store.transact(|txn| {
            let mut created = Vec::new();
            for (kind, target, payload) in candidates {
                let ck = cooldown_key(kind, &target);
                let last = txn
                    .view()
                    .doc(COOLDOWN, &ck)
                    .and_then(|v| v.as_str())
                    .and_then(crate::ingest::parse_timestamp);
                if last.is_some_and(|l| now - l < cooldown) {
                    continue;
                }
                let status = if self.config.auto_approve.contains(&kind) {
                    ActionStatus::Approved
                } else {
                    ActionStatus::Proposed
                };
                let action = ImprovementAction {
                    action_id: txn.next_id("action"),
                    kind,
                    target,
                    payload,
                    status,
                    proposed_at: now,
                    response_id: None,
                    error: None,
                    supersedes: None,
                };
                txn.put_doc(COOLDOWN, &ck, &ts::format(&now))?;
                txn.put_doc(ACTIONS, &key(action.action_id), &action)?;
                created.push(action);
            }
            Ok(created)
        })?;
        if self.writer.is_some() {
            let mut out = Vec::with_capacity(created.len());
            for a in created {
                if a.status == ActionStatus::Approved {
                    match self.apply(a.action_id) {
                        Ok(applied) => out.push(applied),
                        Err(ImproveError::WriterRejected { action }) => out.push(*action),
                        Err(e) => return Err(e),
                    }
                } else {
                    out.push(a);
                }
            }
            return Ok(out);
        }
        Ok(created)
    }

    pub fn get(&self, action_id: u64) -> Option<ImprovementAction> {
        self.store
            .snapshot()
            .doc_as(ACTIONS, &key(action_id))
            .ok()
            .flatten()
    }

    /// All actions, optionally filtered by status, oldest first.
    pub fn list(&self, status: Option<ActionStatus>) -> Vec<ImprovementAction> {
        let snap = self.store.snapshot();
        snap.docs(ACTIONS)
            .into_iter()
            .filter_map(|(_, v)| serde_json::from_value::<ImprovementAction>(v.clone()).ok())
            .filter(|a| status.is_none_or(|s| a.status == s))
            .collect()
    }

    fn transition(
        &self,
        action_id: u64,
        to: ActionStatus,
    ) -> Result<ImprovementAction, ImproveError> {
        let result = self.store.transact(|txn| {
            let Some(mut action) = txn
                .view()
                .doc_as::<ImprovementAction>(ACTIONS, &key(action_id))?
            else {
                return Ok(Err(ImproveError::NotFound(action_id)));
            };
            if action.status == to {
                return Ok(Ok(action));
            }
            if !action.status.can_transition_to(to) {
                return Ok(Err(ImproveError::IllegalTransition {
                    from: action.status,
                    to,
                }));
            }
            action.status = to;
            txn.put_doc(ACTIONS, &key(action_id), &action)?;
            Ok(Ok(action))
        })?;
        result
    }

    /// Idempotent.
    pub fn approve(&self, action_id: u64) -> Result<ImprovementAction, ImproveError> {
        self.transition(action_id, ActionStatus::Approved)
    }

    pub fn reject(&self, action_id: u64) -> Result<ImprovementAction, ImproveError> {
        self.transition(action_id, ActionStatus::Rejected)
    }

    /// A failed action is retried only through a new, approved action that
    /// supersedes it.
    pub fn reapprove(&self, action_id: u64) -> Result<ImprovementAction, ImproveError> {
        let now = self.clock.now();
        let result = self.store.transact(|txn| {
            let Some(old) = txn
                .view()
                .doc_as::<ImprovementAction>(ACTIONS, &key(action_id))?
            else {
                return Ok(Err(ImproveError::NotFound(action_id)));
            };
            if old.status != ActionStatus::Failed {
                return Ok(Err(ImproveError::IllegalTransition {
                    from: old.status,
                    to: ActionStatus::Approved,
                }));
            }
            let action = ImprovementAction {
                action_id: txn.next_id("action"),
                status: ActionStatus::Approved,
                proposed_at: now,
                response_id: None,
                error: None,
                supersedes: Some(old.action_id),
                ..old
            };
            txn.put_doc(ACTIONS, &key(action.action_id), &action)?;
            Ok(Ok(action))
        })?;
        result
    }

    fn lock_for(&self, project_id: u64) -> Arc<Mutex<()>> {
        self.project_locks
            .lock()
            .entry(project_id)
            .or_default()
            .clone()
    }

    fn invoke(
        &self,
        writer: &dyn ActualTwinWriter,
        a: &ImprovementAction,
    ) -> Result<String, String> {
        let p = a.target.project_id;
        let get = |k: &str| a.payload.get(k).cloned().unwrap_or_default();
        let r = match a.kind {
            ActionKind::EnableCache => writer.set_ci_variable(p, &get("variable"), &get("value")),
            ActionKind::SetCiVariable => writer.set_ci_variable(p, &get("key"), &get("value")),
            ActionKind::RetryJob => match a.target.job_id {
                Some(j) => writer.retry_job(p, j),
                None => return Err("retry_job without a job".into()),
            },
            ActionKind::OpenAdvisory => {
                let mut body = String::from("# Build advisory\n\n");
                for (k, v) in &a.payload {
                    if k != "path" {
                        body.push_str(&format!("- {k}: {v}\n"));
                    }
                }
                let path = get("path");
                writer.upsert_file(
                    p,
                    &path,
                    &body,
                    &format!("cbdt advisory for action {}", a.action_id),
                )
            }
        };
        r.map_err(|e| e.to_string())
    }

    /// Executes an approved action through the writer. Each action reaches
    /// the writer at most once; applying an applied action returns it as is.
    pub fn apply(&self, action_id: u64) -> Result<ImprovementAction, ImproveError> {
        let writer = self.writer.clone().ok_or(ImproveError::NoWriter)?;
        let current = self
            .get(action_id)
            .ok_or(ImproveError::NotFound(action_id))?;
        let lock = self.lock_for(current.target.project_id);
        let _serial = lock.lock();
        let now = self.clock.now();
        // Claim the action in the ledger before touching the writer.
        let claimed = self.store.transact(|txn| {
            let Some(action) = txn
                .view()
                .doc_as::<ImprovementAction>(ACTIONS, &key(action_id))?
            else {
                return Ok(Err(ImproveError::NotFound(action_id)));
            };
            if action.status == ActionStatus::Applied {
                return Ok(Ok((action, false)));
            }
            if action.status != ActionStatus::Approved
                || txn.view().doc(LEDGER, &key(action_id)).is_some()
            {
                return Ok(Err(ImproveError::IllegalTransition {
                    from: action.status,
                    to: ActionStatus::Applied,
                }));
            }
            let entry = LedgerEntry {
                at: now,
                response_id: None,
                error: None,
            };
            txn.put_doc(LEDGER, &key(action_id), &entry)?;
            Ok(Ok((action, true)))
        })??;
        let (mut action, fresh) = claimed;
        if !fresh {
            return Ok(action);
        }
        let outcome = self.invoke(writer.as_ref(), &action);
        match &outcome {
            Ok(id) => {
                action.status = ActionStatus::Applied;
                action.response_id = Some(id.clone());
            }
            Err(e) => {
                action.status = ActionStatus::Failed;
                action.error = Some(e.clone());
            }
        }
        let entry = LedgerEntry {
            at: now,
            response_id: action.response_id.clone(),
            error: action.error.clone(),
        };
        self.store.transact(|txn| {
            txn.put_doc(LEDGER, &key(action_id), &entry)?;
            txn.put_doc(ACTIONS, &key(action_id), &action)
        })?;
        match outcome {
            Ok(_) => Ok(action),
            Err(_) => Err(ImproveError::WriterRejected {
                action: Box::new(action),
            }),
        }
    }

    /// Number of actions that ever reached the writer.
    pub fn ledger_len(&self) -> usize {
        self.store.snapshot().docs(LEDGER).len()
    }
}
