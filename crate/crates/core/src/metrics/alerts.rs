//! Threshold alerts on closed metric windows.
//!
//! A rule fires when its condition holds on the most recent closed window
//! and did not hold on the window before it. Each (rule, window) fires at
//! most once, however often evaluation runs.

use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::Receiver;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use super::{align_floor, compute_snapshot, previous_boundary};
use crate::clock::SharedClock;
use crate::model::{ts, AlertRule, AlertSink, MetricSnapshot, Timestamp};
use crate::store::{Snapshot, Store, StoreError};

const RULES: &str = "alerts.rules";
const FIRED: &str = "alerts.fired";
const FIRINGS: &str = "alerts.firings";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertFiring {
    pub rule_id: String,
    pub snapshot: MetricSnapshot,
    #[serde(with = "ts")]
    pub fired_at: Timestamp,
}

#[derive(Debug, thiserror::Error)]
pub enum AlertError {
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("no rule {0}")]
    NotFound(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type FiringListener = Arc<dyn Fn(&AlertFiring) + Send + Sync>;

fn holds(rule: &AlertRule, s: &MetricSnapshot) -> bool {
    s.value(rule.metric)
        .is_some_and(|v| rule.comparator.holds(v, rule.threshold))
}

/// The latest closed window of `rule` at `now`, if the rule's condition
/// became true on it.
pub fn rising_edge(snap: &Snapshot, rule: &AlertRule, now: Timestamp) -> Option<MetricSnapshot> {
    let latest_end = align_floor(rule.interval, now);
    let latest_start = previous_boundary(rule.interval, latest_end);
    let before_start = previous_boundary(rule.interval, latest_start);
    let latest = compute_snapshot(snap, &rule.scope, rule.interval, latest_start).ok()?;
    if !holds(rule, &latest) {
        return None;
    }
    let before = compute_snapshot(snap, &rule.scope, rule.interval, before_start).ok()?;
    (!holds(rule, &before)).then_some(latest)
}

pub struct AlertEngine {
    store: Arc<Store>,
    clock: SharedClock,
    listeners: RwLock<Vec<FiringListener>>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for AlertEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AlertEngine").finish_non_exhaustive()
    }
}

impl AlertEngine {
    pub fn new(store: Arc<Store>, clock: SharedClock) -> Self {
        AlertEngine {
            store,
            clock,
            listeners: RwLock::new(Vec::new()),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(5))
                .build(),
        }
    }

    /// Registers a callback invoked for every firing.
    pub fn on_firing(&self, listener: FiringListener) {
        self.listeners.write().push(listener);
    }

    pub fn add_rule(&self, mut rule: AlertRule) -> Result<AlertRule, AlertError> {
        rule.validate().map_err(AlertError::InvalidRule)?;
        if let AlertSink::WebhookUrl(url) = &rule.sink {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(AlertError::InvalidRule(
                    "webhook_url must be http(s)".into(),
                ));
            }
        }
        let rule = self.store.transact(|txn| {
            if rule.rule_id.is_empty() {
                rule.rule_id = format!("rule-{}", txn.next_id("alert_rule"));
            }
            txn.put_doc(RULES, &rule.rule_id, &rule)?;
            Ok(rule)
        })?;
        Ok(rule)
    }

    pub fn rules(&self) -> Vec<AlertRule> {
        let snap = self.store.snapshot();
        let mut rules: Vec<AlertRule> = snap
            .docs(RULES)
            .into_iter()
            .filter_map(|(_, v)| serde_json::from_value(v.clone()).ok())
            .collect();
        rules.sort_by(|a, b| a.rule_id.cmp(&b.rule_id));
        rules
    }

    pub fn delete_rule(&self, rule_id: &str) -> Result<(), AlertError> {
        self.store
            .transact(|txn| {
                if txn.view().doc(RULES, rule_id).is_none() {
                    return Err(StoreError::NotFound(rule_id.to_string()));
                }
                txn.delete_doc(RULES, rule_id);
                txn.delete_doc(FIRED, rule_id);
                Ok(())
            })
            .map_err(|e| match e {
                StoreError::NotFound(id) => AlertError::NotFound(id),
                other => AlertError::Store(other),
            })
    }

    /// Evaluates every stored rule at the current clock time.
    pub fn evaluate(&self) -> Result<Vec<AlertFiring>, AlertError> {
        self.evaluate_rules(&self.rules(), self.clock.now())
    }

    pub fn evaluate_rules(
        &self,
        rules: &[AlertRule],
        now: Timestamp,
    ) -> Result<Vec<AlertFiring>, AlertError> {
        let snap = self.store.snapshot();
        let mut out = Vec::new();
        for rule in rules {
            let Some(window) = rising_edge(&snap, rule, now) else {
                continue;
            };
            let window_key = ts::format(&window.window_start);
            let firing = AlertFiring {
                rule_id: rule.rule_id.clone(),
                snapshot: window,
                fired_at: now,
            };
            let fresh = self.store.transact(|txn| {
                let seen = txn
                    .view()
                    .doc(FIRED, &rule.rule_id)
                    .and_then(|v| v.as_str().map(str::to_string));
                if seen.as_deref() == Some(window_key.as_str()) {
                    return Ok(false);
                }
                txn.put_doc(FIRED, &rule.rule_id, &window_key)?;
                let seq = txn.next_id("alert_firing");
                txn.put_doc(FIRINGS, &format!("{seq:012}"), &firing)?;
                Ok(true)
            })?;
            if fresh {
                self.deliver(rule, &firing);
                out.push(firing);
            }
        }
        Ok(out)
    }

    fn deliver(&self, rule: &AlertRule, firing: &AlertFiring) {
        match &rule.sink {
            AlertSink::Log => tracing::warn!(
                rule = %firing.rule_id,
                metric = ?rule.metric,
                value = ?firing.snapshot.value(rule.metric),
                "alert fired"
            ),
            AlertSink::WebhookUrl(url) => {
                let body = serde_json::to_value(firing).expect("firing serializes");
                if let Err(e) = self.agent.post(url).send_json(body) {
                    tracing::warn!(error = %e, url, "alert webhook delivery failed");
                }
            }
        }
        for l in self.listeners.read().iter() {
            l(firing);
        }
    }

    /// Most recent firings, newest first.
    pub fn firings(&self, limit: usize) -> Vec<AlertFiring> {
        let snap = self.store.snapshot();
        snap.docs(FIRINGS)
            .into_iter()
            .rev()
            .take(limit)
            .filter_map(|(_, v)| serde_json::from_value(v.clone()).ok())
            .collect()
    }

    /// Evaluates every `interval` until `stop` fires.
    pub fn run(&self, interval: Duration, stop: Receiver<()>) {
        loop {
            if let Err(e) = self.evaluate() {
                tracing::warn!(error = %e, "alert evaluation failed");
            }
            match stop.recv_timeout(interval) {
                Err(crossbeam_channel::RecvTimeoutError::Timeout) => continue,
                _ => return,
            }
        }
    }
}
