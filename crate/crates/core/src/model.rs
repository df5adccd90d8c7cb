//! Domain types shared across the twin.
//!
//! Every type here is an immutable value with a canonical JSON encoding:
//! snake_case field names and RFC 3339 UTC timestamps at millisecond
//! precision. Mutation happens only through [`crate::store::Store`].

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub type Timestamp = DateTime<Utc>;

/// Canonical timestamp encoding: RFC 3339, `Z` suffix, milliseconds.
pub mod ts {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn format(t: &DateTime<Utc>) -> String {
        t.to_rfc3339_opts(SecondsFormat::Millis, true)
    }

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format(t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&raw)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(
            t: &Option<DateTime<Utc>>,
            s: S,
        ) -> Result<S::Ok, S::Error> {
            match t {
                Some(t) => s.serialize_some(&format(t)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Option<DateTime<Utc>>, D::Error> {
            let raw: Option<String> = Option::deserialize(d)?;
            raw.map(|r| {
                DateTime::parse_from_rfc3339(&r)
                    .map(|t| t.with_timezone(&Utc))
                    .map_err(serde::de::Error::custom)
            })
            .transpose()
        }
    }
}

/// Truncates a timestamp to millisecond precision.
pub fn truncate_millis(t: Timestamp) -> Timestamp {
    DateTime::from_timestamp_millis(t.timestamp_millis()).expect("millisecond timestamp in range")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Created,
    Pending,
    Running,
    Success,
    Failed,
    Canceled,
    Skipped,
}

impl JobStatus {
    pub const ALL: [JobStatus; 7] = [
        JobStatus::Created,
        JobStatus::Pending,
        JobStatus::Running,
        JobStatus::Success,
        JobStatus::Failed,
        JobStatus::Canceled,
        JobStatus::Skipped,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobStatus::Success | JobStatus::Failed | JobStatus::Canceled | JobStatus::Skipped
        )
    }

    /// Completed jobs carry a pass/fail signal and form ratio denominators.
    pub fn is_completed(self) -> bool {
        matches!(self, JobStatus::Success | JobStatus::Failed)
    }

    /// Update precedence used by the store: created < pending < running < terminal.
    pub fn precedence(self) -> u8 {
        match self {
            JobStatus::Created => 0,
            JobStatus::Pending => 1,
            JobStatus::Running => 2,
            _ => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Created => "created",
            JobStatus::Pending => "pending",
            JobStatus::Running => "running",
            JobStatus::Success => "success",
            JobStatus::Failed => "failed",
            JobStatus::Canceled => "canceled",
            JobStatus::Skipped => "skipped",
        }
    }
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One CI job execution; the twin's atomic fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildJob {
    pub job_id: u64,
    pub project_id: u64,
    pub pipeline_id: u64,
    pub name: String,
    #[serde(rename = "ref")]
    pub git_ref: String,
    pub commit_sha: String,
    pub status: JobStatus,
    #[serde(with = "ts")]
    pub created_at: Timestamp,
    #[serde(with = "ts::option", default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<Timestamp>,
    #[serde(with = "ts::option", default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queued_duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runner_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flaky: Option<bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub features: BTreeMap<String, f64>,
}

impl BuildJob {
    /// Latest status-change time known for this job.
    pub fn updated_at(&self) -> Timestamp {
        self.finished_at
            .or(self.started_at)
            .unwrap_or(self.created_at)
    }

    /// Same record ignoring the fields computed by post-processing.
    pub fn same_source_fields(&self, other: &BuildJob) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.flaky = None;
        b.flaky = None;
        a.features.clear();
        b.features.clear();
        a == b
    }
}

/// A single violated [`BuildJob`] invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    StartedBeforeCreated,
    FinishedBeforeStarted,
    DurationOnIncompleteJob,
    FlakyOnNonFailed,
    NegativeDuration,
    NegativeQueuedDuration,
    NonFiniteValue,
    EmptyName,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Violation::StartedBeforeCreated => "started_at ≥ created_at",
            Violation::FinishedBeforeStarted => "finished_at ≥ started_at",
            Violation::DurationOnIncompleteJob => "duration ⇒ success or failed",
            Violation::FlakyOnNonFailed => "flaky ⇒ failed",
            Violation::NegativeDuration => "duration ≥ 0",
            Violation::NegativeQueuedDuration => "queued_duration ≥ 0",
            Violation::NonFiniteValue => "numeric fields finite",
            Violation::EmptyName => "name non-empty",
        };
        f.write_str(s)
    }
}

/// Returns every invariant the job violates; empty means valid.
pub fn validate_job(job: &BuildJob) -> Vec<Violation> {
    let mut out = Vec::new();
    if job.name.is_empty() {
        out.push(Violation::EmptyName);
    }
    if let Some(started) = job.started_at {
        if started < job.created_at {
            out.push(Violation::StartedBeforeCreated);
        }
        if let Some(finished) = job.finished_at {
            if finished < started {
                out.push(Violation::FinishedBeforeStarted);
            }
        }
    }
    if let Some(d) = job.duration {
        if !job.status.is_completed() {
            out.push(Violation::DurationOnIncompleteJob);
        }
        if d < 0.0 {
            out.push(Violation::NegativeDuration);
        }
    }
    if job.queued_duration.is_some_and(|q| q < 0.0) {
        out.push(Violation::NegativeQueuedDuration);
    }
    if job.flaky == Some(true) && job.status != JobStatus::Failed {
        out.push(Violation::FlakyOnNonFailed);
    }
    let non_finite = job.duration.is_some_and(|v| !v.is_finite())
        || job.queued_duration.is_some_and(|v| !v.is_finite())
        || job.features.values().any(|v| !v.is_finite());
    if non_finite {
        out.push(Violation::NonFiniteValue);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Project {
    pub project_id: u64,
    pub path: String,
    pub default_ref: String,
}

/// Project selection for metrics, alerts and what-if sampling.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    All,
    Projects(Vec<u64>),
}

impl Scope {
    pub fn contains(&self, project_id: u64) -> bool {
        match self {
            Scope::All => true,
            Scope::Projects(ids) => ids.contains(&project_id),
        }
    }

    /// Parses `ALL` or a comma-separated project id list.
    pub fn parse(s: &str) -> Option<Scope> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") || s.is_empty() {
            return Some(Scope::All);
        }
        let mut ids = s
            .split(',')
            .map(|p| p.trim().parse::<u64>().ok())
            .collect::<Option<Vec<_>>>()?;
        ids.sort_unstable();
        ids.dedup();
        Some(Scope::Projects(ids))
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::All => f.write_str("ALL"),
            Scope::Projects(ids) => {
                let parts: Vec<String> = ids.iter().map(u64::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interval {
    Hourly,
    Daily,
    Weekly,
    Monthly,
    Yearly,
}

impl Interval {
    pub fn parse(s: &str) -> Option<Interval> {
        match s {
            "hourly" => Some(Interval::Hourly),
            "daily" => Some(Interval::Daily),
            "weekly" => Some(Interval::Weekly),
            "monthly" => Some(Interval::Monthly),
            "yearly" => Some(Interval::Yearly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    ExecutionsFrequency,
    MeanDuration,
    FailureRatio,
    FlakyFailureRatio,
}

impl MetricName {
    pub fn is_ratio(self) -> bool {
        matches!(
            self,
            MetricName::FailureRatio | MetricName::FlakyFailureRatio
        )
    }
}

/// The four build performance metrics over one aligned window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub scope: Scope,
    #[serde(with = "ts")]
    pub window_start: Timestamp,
    #[serde(with = "ts")]
    pub window_end: Timestamp,
    pub interval: Interval,
    pub executions_frequency: u64,
    pub mean_duration: Option<f64>,
    pub failure_ratio: Option<f64>,
    pub flaky_failure_ratio: Option<f64>,
}

impl MetricSnapshot {
    pub fn value(&self, metric: MetricName) -> Option<f64> {
        match metric {
            MetricName::ExecutionsFrequency => Some(self.executions_frequency as f64),
            MetricName::MeanDuration => self.mean_duration,
            MetricName::FailureRatio => self.failure_ratio,
            MetricName::FlakyFailureRatio => self.flaky_failure_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Duration,
    Failure,
    Flaky,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Duration, ModelKind::Failure, ModelKind::Flaky];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Duration => "duration",
            ModelKind::Failure => "failure",
            ModelKind::Flaky => "flaky",
        }
    }

    pub fn is_probability(self) -> bool {
        !matches!(self, ModelKind::Duration)
    }
}

/// A model output, later paired with the observed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub prediction_id: u64,
    pub job_id: u64,
    pub model_kind: ModelKind,
    pub predicted_value: f64,
    /// Spread of the duration prediction in log-seconds; absent for probabilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_sigma: Option<f64>,
    pub model_snapshot_id: String,
    #[serde(with = "ts")]
    pub predicted_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    Webhook,
    Backfill,
    ScheduledRefresh,
}

/// Bus message announcing newly integrated jobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataIntegratedEvent {
    pub event_id: String,
    #[serde(with = "ts")]
    pub emitted_at: Timestamp,
    pub job_ids: Vec<u64>,
    pub source: EventSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=", alias = "≥")]
    Ge,
    #[serde(rename = "<=", alias = "≤")]
    Le,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Gt => value > threshold,
            Comparator::Lt => value < threshold,
            Comparator::Ge => value >= threshold,
            Comparator::Le => value <= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertSink {
    Log,
    WebhookUrl(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRule {
    #[serde(default)]
    pub rule_id: String,
    pub metric: MetricName,
    pub scope: Scope,
    pub interval: Interval,
    pub comparator: Comparator,
    pub threshold: f64,
    #[serde(default = "default_sink")]
    pub sink: AlertSink,
}

fn default_sink() -> AlertSink {
    AlertSink::Log
}

impl AlertRule {
    pub fn validate(&self) -> Result<(), String> {
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err("threshold must be finite and ≥ 0".into());
        }
        if self.metric.is_ratio() && self.threshold > 1.0 {
            return Err("ratio thresholds must be ≤ 1".into());
        }
        Ok(())
    }
}

/// How a scenario changes one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureDelta {
    Add(f64),
    Set(f64),
}

impl FeatureDelta {
    pub fn apply(self, value: f64) -> f64 {
        match self {
            FeatureDelta::Add(d) => value + d,
            FeatureDelta::Set(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSampleSpec {
    pub scope: Scope,
    /// Number of most recent terminal jobs to evaluate over.
    #[serde(default = "default_trailing_jobs")]
    pub trailing_jobs: usize,
}

fn default_trailing_jobs() -> usize {
    200
}

impl Default for JobSampleSpec {
    fn default() -> Self {
        JobSampleSpec {
            scope: Scope::All,
            trailing_jobs: default_trailing_jobs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub scenario_id: String,
    pub label: String,
    #[serde(default)]
    pub feature_deltas: BTreeMap<String, FeatureDelta>,
    #[serde(default)]
    pub job_sample_spec: JobSampleSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhatIfMetric {
    FailureProbability,
    FlakyProbability,
    ExpectedDuration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub baseline_value: f64,
    pub scenario_value: f64,
    pub delta: f64,
}

impl SensitivityEntry {
    pub fn new(baseline_value: f64, scenario_value: f64) -> Self {
        SensitivityEntry {
            baseline_value,
            scenario_value,
            delta: scenario_value - baseline_value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub scenario_id: String,
    pub label: String,
    pub model_snapshot_id: String,
    pub metrics: BTreeMap<WhatIfMetric, SensitivityEntry>,
    pub sample_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    EnableCache,
    RetryJob,
    SetCiVariable,
    OpenAdvisory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionStatus {
    Proposed,
    Approved,
    Applied,
    Rejected,
    Failed,
}

impl ActionStatus {
    pub fn can_transition_to(self, next: ActionStatus) -> bool {
        use ActionStatus::*;
        matches!(
            (self, next),
            (Proposed, Approved) | (Proposed, Rejected) | (Approved, Applied) | (Approved, Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionTarget {
    pub project_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementAction {
    pub action_id: u64,
    pub kind: ActionKind,
    pub target: ActionTarget,
    pub payload: BTreeMap<String, String>,
    pub status: ActionStatus,
    #[serde(with = "ts")]
    pub proposed_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn at(s: i64) -> Timestamp {
        Utc.timestamp_opt(1_720_000_000 + s, 0).unwrap()
    }

    fn terminal_job() -> BuildJob {
        BuildJob {
            job_id: 1,
            project_id: 10,
            pipeline_id: 100,
            name: "test".into(),
            git_ref: "main".into(),
            commit_sha: "abc123".into(),
            status: JobStatus::Success,
            created_at: at(0),
            started_at: Some(at(5)),
            finished_at: Some(at(65)),
            queued_duration: Some(5.0),
            duration: Some(60.0),
            runner_id: Some(3),
            flaky: None,
            features: BTreeMap::new(),
        }
    }

    #[test]
    fn well_formed_job_is_valid() {
        assert!(validate_job(&terminal_job()).is_empty());
    }

    #[test]
    fn finish_before_start_is_flagged() {
        let mut job = terminal_job();
        job.finished_at = Some(at(1));
        let v = validate_job(&job);
        assert_eq!(v, vec![Violation::FinishedBeforeStarted]);
        assert_eq!(v[0].to_string(), "finished_at ≥ started_at");
    }

    #[test]
    fn flaky_success_is_flagged() {
        let mut job = terminal_job();
        job.flaky = Some(true);
        let v = validate_job(&job);
        assert_eq!(v, vec![Violation::FlakyOnNonFailed]);
        assert_eq!(v[0].to_string(), "flaky ⇒ failed");
    }

    #[test]
    fn reports_every_violation() {
        let mut job = terminal_job();
        job.status = JobStatus::Running;
        job.started_at = Some(at(-10));
        job.flaky = Some(true);
        let v = validate_job(&job);
        assert!(v.contains(&Violation::StartedBeforeCreated));
        assert!(v.contains(&Violation::DurationOnIncompleteJob));
        assert!(v.contains(&Violation::FlakyOnNonFailed));
    }

    #[test]
    fn status_sets() {
        let terminal: Vec<_> = JobStatus::ALL.iter().filter(|s| s.is_terminal()).collect();
        assert_eq!(terminal.len(), 4);
        let completed: Vec<_> = JobStatus::ALL
            .iter()
            .filter(|s| s.is_completed())
            .copied()
            .collect();
        assert_eq!(completed, vec![JobStatus::Success, JobStatus::Failed]);
    }

    #[test]
    fn canonical_encoding_uses_millis_and_z() {
        let json = serde_json::to_value(terminal_job()).unwrap();
        assert_eq!(json["created_at"], "2024-07-03T09:46:40.000Z");
        assert_eq!(json["ref"], "main");
        assert!(json.get("flaky").is_none());
    }

    #[test]
    fn comparator_parses_unicode_aliases() {
        let c: Comparator = serde_json::from_str("\"≥\"").unwrap();
        assert_eq!(c, Comparator::Ge);
        assert!(c.holds(0.5, 0.5));
    }

    #[test]
    fn scope_parse() {
        assert_eq!(Scope::parse("ALL"), Some(Scope::All));
        assert_eq!(Scope::parse("3, 1,3"), Some(Scope::Projects(vec![1, 3])));
        assert_eq!(Scope::parse("x"), None);
    }

    fn arb_status() -> impl Strategy<Value = JobStatus> {
        proptest::sample::select(JobStatus::ALL.to_vec())
    }

    prop_compose! {
        fn arb_valid_job()(
            job_id in any::<u64>(),
            project_id in 0u64..1000,
            pipeline_id in any::<u64>(),
            name in "[a-z:_-]{1,12}",
            status in arb_status(),
            created_ms in 0i64..4_000_000_000_000,
            start_off in proptest::option::of(0i64..1_000_000),
            run_ms in 0i64..10_000_000,
            queued in proptest::option::of(0.0f64..1e6),
            dur in 0.0f64..1e6,
            flaky in any::<bool>(),
            feats in proptest::collection::btree_map("[a-z_]{1,8}", -1e6f64..1e6, 0..4),
        ) -> BuildJob {
            let created_at = DateTime::from_timestamp_millis(created_ms).unwrap();
            let started_at = start_off.map(|o| created_at + chrono::Duration::milliseconds(o));
            let finished_at = if status.is_terminal() {
                started_at.map(|s| s + chrono::Duration::milliseconds(run_ms))
            } else {
                None
            };
            BuildJob {
                job_id,
                project_id,
                pipeline_id,
                name,
                git_ref: "main".into(),
                commit_sha: "deadbeef".into(),
                status,
                created_at,
                started_at,
                finished_at,
                queued_duration: queued,
                duration: status.is_completed().then_some(dur),
                runner_id: None,
                flaky: (status == JobStatus::Failed).then_some(flaky),
                features: feats,
            }
        }
    }

    proptest! {
        #[test]
        fn generated_jobs_are_valid(job in arb_valid_job()) {
            prop_assert!(validate_job(&job).is_empty());
        }

        #[test]
        fn json_round_trip(job in arb_valid_job()) {
            let text = serde_json::to_string(&job).unwrap();
            let back: BuildJob = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, job);
        }
    }
}
