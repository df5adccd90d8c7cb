//! Raw platform records to [`BuildJob`]s.

use chrono::{DateTime, NaiveDateTime, Utc};
use serde_json::Value;

use crate::model::{truncate_millis, validate_job, BuildJob, JobStatus, Timestamp};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("unparseable record: {reason}")]
pub struct Unparseable {
    pub reason: String,
}

fn fail<T>(reason: impl Into<String>) -> Result<T, Unparseable> {
    Err(Unparseable {
        reason: reason.into(),
    })
}

/// Platform status string to the closed status set; `None` for unknown strings.
pub fn map_status(raw: &str) -> Option<JobStatus> {
    Some(match raw {
        "created" | "pending" => JobStatus::Pending,
        "running" => JobStatus::Running,
        "success" => JobStatus::Success,
        "failed" => JobStatus::Failed,
        "canceled" => JobStatus::Canceled,
        "skipped" | "manual" => JobStatus::Skipped,
        _ => return None,
    })
}

/// Accepts RFC 3339 with any offset and the `YYYY-MM-DD HH:MM:SS UTC` form
/// used in webhook payloads. The result is UTC at millisecond precision.
pub fn parse_timestamp(raw: &str) -> Option<Timestamp> {
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(truncate_millis(t.with_timezone(&Utc)));
    }
    if let Ok(t) = DateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S%.f %z") {
        return Some(truncate_millis(t.with_timezone(&Utc)));
    }
    let bare = raw.strip_suffix(" UTC")?;
    NaiveDateTime::parse_from_str(bare, "%Y-%m-%d %H:%M:%S%.f")
        .ok()
        .map(|t| truncate_millis(t.and_utc()))
}

fn u64_at(raw: &Value, paths: &[&[&str]]) -> Option<u64> {
    paths.iter().find_map(|p| {
        let v = p.iter().try_fold(raw, |v, k| v.get(*k))?;
        v.as_u64()
            .or_else(|| v.as_str().and_then(|s| s.parse().ok()))
    })
}

fn str_at<'a>(raw: &'a Value, paths: &[&[&str]]) -> Option<&'a str> {
    paths
        .iter()
        .find_map(|p| p.iter().try_fold(raw, |v, k| v.get(*k))?.as_str())
}

fn time_at(raw: &Value, key: &str) -> Result<Option<Timestamp>, Unparseable> {
    match raw.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => match parse_timestamp(s) {
            Some(t) => Ok(Some(t)),
            None => fail(format!("{key}: bad timestamp {s:?}")),
        },
        Some(other) => fail(format!("{key}: expected string, got {other}")),
    }
}

fn seconds_at(raw: &Value, key: &str) -> Result<Option<f64>, Unparseable> {
    match raw.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => match v.as_f64() {
            Some(x) if x.is_finite() && x >= 0.0 => Ok(Some(x)),
            _ => fail(format!("{key}: expected non-negative number, got {v}")),
        },
    }
}

/// Parses one GitLab job record. `project_hint` supplies the project id when
/// the record itself does not carry one (the jobs API nests it under
/// `pipeline`). Derived fields are left empty.
pub fn preprocess(raw: &Value, project_hint: Option<u64>) -> Result<BuildJob, Unparseable> {
    if !raw.is_object() {
        return fail("record is not an object");
    }
    let Some(job_id) = u64_at(raw, &[&["id"], &["build_id"]]) else {
        return fail("missing job id");
    };
    let Some(project_id) =
        u64_at(raw, &[&["project_id"], &["pipeline", "project_id"]]).or(project_hint)
    else {
        return fail("missing project id");
    };
    let Some(pipeline_id) = u64_at(raw, &[&["pipeline", "id"], &["pipeline_id"]]) else {
        return fail("missing pipeline id");
    };
    let Some(name) = str_at(raw, &[&["name"], &["build_name"]]).filter(|n| !n.is_empty()) else {
        return fail("missing name");
    };
    let Some(raw_status) = str_at(raw, &[&["status"], &["build_status"]]) else {
        return fail("missing status");
    };
    let Some(status) = map_status(raw_status) else {
        return fail(format!("unknown status {raw_status:?}"));
    };
    let Some(created_at) = time_at(raw, "created_at")?.or(time_at(raw, "build_created_at")?) else {
        return fail("missing created_at");
    };
    let started_at = time_at(raw, "started_at")?.or(time_at(raw, "build_started_at")?);
    let finished_at = time_at(raw, "finished_at")?.or(time_at(raw, "build_finished_at")?);
    let duration = seconds_at(raw, "duration")?.or(seconds_at(raw, "build_duration")?);
    let queued_duration =
        seconds_at(raw, "queued_duration")?.or(seconds_at(raw, "build_queued_duration")?);
    let job = BuildJob {
        job_id,
        project_id,
        pipeline_id,
        name: name.to_string(),
        git_ref: str_at(raw, &[&["ref"], &["pipeline", "ref"]])
            .unwrap_or_default()
            .to_string(),
        commit_sha: str_at(raw, &[&["pipeline", "sha"], &["commit", "id"], &["sha"]])
            .unwrap_or_default()
            .to_string(),
        status,
        created_at,
        started_at,
        finished_at: if status.is_terminal() {
            finished_at
        } else {
            None
        },
        queued_duration,
        // Platforms report a running time for canceled jobs; only completed
        // jobs carry a duration in the twin.
        duration: if status.is_completed() {
            duration
        } else {
            None
        },
        runner_id: u64_at(raw, &[&["runner", "id"], &["runner_id"]]),
        flaky: None,
        features: Default::default(),
    };
    let violations = validate_job(&job);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return fail(format!("invalid job: {}", list.join(", ")));
    }
    Ok(job)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn raw() -> Value {
        json!({
            "id": 7,
            "name": "test",
            "status": "failed",
            "ref": "main",
            "created_at": "2024-07-01T09:58:00.000+02:00",
            "started_at": "2024-07-01T09:59:00+02:00",
            "finished_at": "2024-07-01T10:00:00+02:00",
            "duration": 60.0,
            "queued_duration": 60.0,
            "pipeline": { "id": 3, "project_id": 1, "sha": "abc" },
            "runner": { "id": 4 },
        })
    }

    #[test]
    fn converts_to_utc() {
        let job = preprocess(&raw(), None).unwrap();
        assert_eq!(
            crate::model::ts::format(&job.finished_at.unwrap()),
            "2024-07-01T08:00:00.000Z"
        );
        assert_eq!(job.project_id, 1);
        assert_eq!(job.pipeline_id, 3);
        assert_eq!(job.runner_id, Some(4));
        assert_eq!(job.commit_sha, "abc");
    }

    #[test]
    fn status_table() {
        let cases = [
            ("created", Some(JobStatus::Pending)),
            ("pending", Some(JobStatus::Pending)),
            ("running", Some(JobStatus::Running)),
            ("success", Some(JobStatus::Success)),
            ("failed", Some(JobStatus::Failed)),
            ("canceled", Some(JobStatus::Canceled)),
            ("skipped", Some(JobStatus::Skipped)),
            ("manual", Some(JobStatus::Skipped)),
            ("preparing", None),
            ("", None),
        ];
        for (s, want) in cases {
            assert_eq!(map_status(s), want, "{s}");
        }
        let mut r = raw();
        r["status"] = json!("manual");
        r["duration"] = Value::Null;
        assert_eq!(preprocess(&r, None).unwrap().status, JobStatus::Skipped);
    }

    #[test]
    fn missing_required_fields() {
        for key in ["id", "name", "status", "created_at"] {
            let mut r = raw();
            r.as_object_mut().unwrap().remove(key);
            assert!(preprocess(&r, None).is_err(), "{key}");
        }
        let mut r = raw();
        r.as_object_mut().unwrap().remove("pipeline");
        assert!(preprocess(&r, Some(1)).is_err());
        assert!(preprocess(&json!([1, 2]), None).is_err());
    }

    #[test]
    fn optional_fields_stay_absent() {
        let mut r = raw();
        r["status"] = json!("pending");
        for k in [
            "started_at",
            "finished_at",
            "duration",
            "queued_duration",
            "runner",
        ] {
            r.as_object_mut().unwrap().remove(k);
        }
        let job = preprocess(&r, None).unwrap();
        assert_eq!(job.duration, None);
        assert_eq!(job.queued_duration, None);
        assert_eq!(job.runner_id, None);
    }

    #[test]
    fn canceled_duration_dropped() {
        let mut r = raw();
        r["status"] = json!("canceled");
        assert_eq!(preprocess(&r, None).unwrap().duration, None);
    }

    #[test]
    fn webhook_timestamp_form() {
        assert_eq!(
            parse_timestamp("2021-02-23 02:41:37 UTC"),
            parse_timestamp("2021-02-23T02:41:37Z")
        );
        assert!(parse_timestamp("yesterday").is_none());
    }
}
