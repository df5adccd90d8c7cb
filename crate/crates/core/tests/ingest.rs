mod common;

use std::sync::Arc;
use std::time::Duration;

use cbdt::adapters::dump::{raw_job, webhook_body};
use cbdt::bus::Topic;
use cbdt::config::Config;
use cbdt::ingest::{preprocess, BackfillConfig, Backoff, IngestError, WebhookError};
use cbdt::model::JobStatus;
use cbdt::ops;
use cbdt::twin::{Twin, TwinParts};
use parking_lot::Mutex;
use serde_json::json;

use common::{export, job, one_project, settled, t, twin_over, Upstream};

fn published(twin: &Twin) -> usize {
    twin.bus.pending(&Topic::build_data_integrated(), "models")
}

#[test]
fn backfill_limit_and_idempotent_rerun() {
    let (twin, _sim, _clock) = settled(one_project(9, 6.0), 250);
    let cfg = BackfillConfig {
        max_jobs_per_project: Some(100),
        ..Default::default()
    };
    let first = twin.ingest.backfill(&cfg).unwrap();
    assert_eq!((first.fetched, first.stored), (100, 100));
    let again = twin.ingest.backfill(&cfg).unwrap();
    assert_eq!((again.stored, again.ignored), (0, 100));
    assert_eq!(twin.store.snapshot().job_count(), 100);
}

#[test]
fn one_event_per_page() {
    let (twin, _sim, _clock) = settled(one_project(3, 20.0), 1000);
    let s = twin
        .ingest
        .backfill(&BackfillConfig {
            page_size: 100,
            ..Default::default()
        })
        .unwrap();
    assert_eq!(s.stored, 1000);
    assert_eq!(s.events_published, 10);
    assert_eq!(published(&twin), 10);
}

#[test]
fn invalid_backfill_config() {
    let (twin, _sim, _clock) = settled(one_project(3, 20.0), 10);
    for cfg in [
        BackfillConfig {
            page_size: 0,
            ..Default::default()
        },
        BackfillConfig {
            page_size: 101,
            ..Default::default()
        },
        BackfillConfig {
            max_jobs_per_project: Some(0),
            ..Default::default()
        },
    ] {
        assert!(matches!(
            twin.ingest.backfill(&cfg),
            Err(IngestError::InvalidConfig(_))
        ));
    }
}

#[test]
fn webhook_contract() {
    let up = Arc::new(Upstream::default());
    let j = job(7, 1, "test", JobStatus::Failed, 0);
    up.jobs.lock().push(j.clone());
    let twin = twin_over(up);
    let body = webhook_body(&j).to_string();

    let version = twin.store.snapshot().version();
    assert!(matches!(
        twin.ingest.handle_webhook(Some(b"wrong"), body.as_bytes()),
        Err(WebhookError::Unauthorized)
    ));
    assert!(matches!(
        twin.ingest.handle_webhook(None, body.as_bytes()),
        Err(WebhookError::Unauthorized)
    ));
    twin.ingest.process_webhooks();
    assert_eq!(twin.store.snapshot().version(), version);

    let event = twin
        .ingest
        .handle_webhook(Some(b"hook"), body.as_bytes())
        .unwrap();
    assert_eq!((event.job_id, event.project_id), (7, 1));
    twin.ingest.process_webhooks();
    assert_eq!(twin.store.get_job(7).unwrap().status, JobStatus::Failed);
    assert_eq!(published(&twin), 1);

    let stored = export(&twin);
    twin.ingest
        .handle_webhook(Some(b"hook"), body.as_bytes())
        .unwrap();
    twin.ingest.process_webhooks();
    assert_eq!(export(&twin), stored);
    assert_eq!(
        published(&twin),
        2,
        "duplicates are still announced; subscribers are idempotent"
    );

    let malformed = twin
        .ingest
        .handle_webhook(Some(b"hook"), b"{\"object_kind\":\"push\"}");
    assert!(matches!(malformed, Err(WebhookError::Malformed(_))));
}

#[test]
fn webhook_for_unreachable_upstream_is_quarantined() {
    let up = Arc::new(Upstream::default());
    let j = job(7, 1, "test", JobStatus::Success, 0);
    up.jobs.lock().push(j.clone());
    let twin = twin_over(up.clone());
    *up.down.lock() = true;
    let body = webhook_body(&j).to_string();
    twin.ingest
        .handle_webhook(Some(b"hook"), body.as_bytes())
        .unwrap();
    twin.ingest.process_webhooks();
    assert!(twin.store.get_job(7).is_none());
    assert_eq!(twin.ingest.dead_letters().len(), 1);

    *up.down.lock() = false;
    let s = twin
        .ingest
        .replay_dead_letters(twin.ingest.dead_letters().recent())
        .unwrap();
    assert_eq!(s.stored, 1);
    assert!(twin.store.get_job(7).is_some());
}

#[test]
fn refresh_fetches_only_the_delta() {
    let up = Arc::new(Upstream::default());
    *up.jobs.lock() = (1..=5)
        .map(|i| job(i, i, "build", JobStatus::Success, i as i64))
        .collect();
    let twin = twin_over(up.clone());
    let first = twin.ingest.refresh_once().unwrap();
    assert_eq!(first.stored, 5);

    let idle = twin.ingest.refresh_once().unwrap();
    assert_eq!((idle.fetched, idle.events_published), (0, 0));

    up.jobs
        .lock()
        .extend((6..=8).map(|i| job(i, i, "build", JobStatus::Failed, 100 + i as i64)));
    let events = published(&twin);
    let delta = twin.ingest.refresh_once().unwrap();
    assert_eq!(
        (delta.fetched, delta.stored, delta.events_published),
        (3, 3, 1)
    );
    assert_eq!(published(&twin), events + 1);
}

#[test]
fn failed_refresh_keeps_the_mark() {
    let up = Arc::new(Upstream::default());
    *up.jobs.lock() = (1..=3)
        .map(|i| job(i, i, "build", JobStatus::Success, i as i64))
        .collect();
    let twin = twin_over(up.clone());
    twin.ingest.refresh_once().unwrap();
    let mark = twin.ingest.high_water_mark(1);

    up.jobs
        .lock()
        .push(job(4, 4, "build", JobStatus::Success, 50));
    *up.down.lock() = true;
    assert!(matches!(
        twin.ingest.refresh_once(),
        Err(IngestError::Unreachable { .. })
    ));
    assert_eq!(twin.ingest.high_water_mark(1), mark);

    *up.down.lock() = false;
    let retry = twin.ingest.refresh_once().unwrap();
    assert_eq!(retry.stored, 1);
    let before = export(&twin);
    twin.ingest.refresh_once().unwrap();
    assert_eq!(export(&twin), before);
}

#[test]
fn rate_limits_back_off_then_give_up() {
    let mut c = Config::default();
    c.adapter.history_jobs = Some(30);
    let (_, sim, clock) = ops::simulation(c.clone()).unwrap();
    clock.set(sim.end() + chrono::Duration::days(1));
    let slept: Arc<Mutex<Vec<Duration>>> = Default::default();
    let backoff = {
        let slept = slept.clone();
        let mut b = Backoff::default()
            .with_seed(1)
            .with_sleeper(Arc::new(move |d| slept.lock().push(d)));
        b.max_attempts = 4;
        b
    };
    c.ingest.webhook_token = Some("x".into());
    let twin = Twin::new(TwinParts::new(c, clock, sim.clone()).backoff(backoff)).unwrap();

    sim.inject_rate_limit(2, Some(Duration::from_secs(3)));
    let s = twin.ingest.backfill(&BackfillConfig::default()).unwrap();
    assert!(s.stored > 0);
    assert_eq!(slept.lock().len(), 2);
    assert!(slept.lock().iter().all(|d| *d >= Duration::from_secs(3)));

    sim.inject_rate_limit(10, None);
    match twin.ingest.refresh_once() {
        Err(IngestError::RateLimited { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("expected rate limit, got {other:?}"),
    }
}

#[test]
fn unreachable_backfill_reports_partial_progress() {
    let (twin, sim, _clock) = settled(ops::default_simulation(), 40);
    sim.set_unreachable(true);
    let err = twin
        .ingest
        .backfill(&BackfillConfig::default())
        .unwrap_err();
    assert!(matches!(err, IngestError::Unreachable { .. }));
    assert_eq!(err.partial().unwrap().stored, 0);
}

#[test]
fn preprocessing_rules() {
    let mut raw = raw_job(&job(1, 1, "build", JobStatus::Success, 0));
    raw["finished_at"] = json!("2024-07-01T10:00:00+02:00");
    raw["started_at"] = json!("2024-07-01T09:00:00+02:00");
    raw["created_at"] = json!("2024-07-01T08:59:00+02:00");
    let j = preprocess(&raw, None).unwrap();
    assert_eq!(j.finished_at, Some(t("2024-07-01T08:00:00Z")));

    raw["status"] = json!("manual");
    assert_eq!(preprocess(&raw, None).unwrap().status, JobStatus::Skipped);

    let up = Arc::new(Upstream::default());
    let twin = twin_over(up);
    let mut broken = raw.clone();
    broken.as_object_mut().unwrap().remove("id");
    let mut unknown = raw.clone();
    unknown["status"] = json!("exploded");
    let out = twin
        .ingest
        .integrate(
            vec![broken, unknown, raw],
            Some(1),
            cbdt::model::EventSource::Backfill,
        )
        .unwrap();
    assert_eq!((out.summary.quarantined, out.summary.stored), (2, 1));
    assert_eq!(twin.ingest.dead_letters().len(), 2);
}
