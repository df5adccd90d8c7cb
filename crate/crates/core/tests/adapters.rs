mod common;

use std::sync::Arc;
use std::time::Duration;

use cbdt::adapters::sim_http::SimServer;
use cbdt::adapters::{ActualTwinReader, ActualTwinWriter, AdapterError, GitLabClient, Simulator};
use cbdt::clock::{Clock, ManualClock};
use cbdt::model::JobStatus;

use common::{one_project, t0};

fn pair(n: usize) -> (Arc<Simulator>, Arc<ManualClock>, SimServer, GitLabClient) {
    let clock = Arc::new(ManualClock::new(t0()));
    let sim = Simulator::with_jobs(one_project(4, 6.0), n, clock.clone()).unwrap();
    clock.set(sim.end() + chrono::Duration::days(1));
    let server = SimServer::start(
        sim.clone(),
        Some("tok".into()),
        "127.0.0.1:0".parse().unwrap(),
    )
    .unwrap();
    let client = GitLabClient::new(&server.base_url(), "tok", Duration::from_secs(5));
    (sim, clock, server, client)
}

#[test]
fn http_client_sees_what_the_simulator_serves() {
    let (sim, clock, _server, client) = pair(5);
    assert_eq!(
        client.list_projects().unwrap(),
        sim.list_projects().unwrap()
    );
    let mut sizes = Vec::new();
    let mut page = 1;
    loop {
        let direct = sim.list_jobs(1, page, 2, None).unwrap();
        let remote = client.list_jobs(1, page, 2, None).unwrap();
        assert_eq!(direct, remote);
        sizes.push(remote.records.len());
        match remote.next_page {
            Some(p) => page = p,
            None => break,
        }
    }
    assert_eq!(sizes, [2, 2, 1]);
    assert!(client.list_jobs(1, 9, 2, None).unwrap().records.is_empty());
    assert!(client
        .list_jobs(1, 1, 2, Some(clock.now()))
        .unwrap()
        .records
        .is_empty());
    assert_eq!(client.get_job(1, 3).unwrap(), sim.get_job(1, 3).unwrap());
    assert!(matches!(
        client.get_job(1, 99),
        Err(AdapterError::NotFound(_))
    ));
}

#[test]
fn per_page_bounds() {
    let (sim, _clock, _server, client) = pair(3);
    for per_page in [0, 101] {
        assert!(matches!(
            sim.list_jobs(1, 1, per_page, None),
            Err(AdapterError::InvalidRequest(_))
        ));
        assert!(matches!(
            client.list_jobs(1, 1, per_page, None),
            Err(AdapterError::InvalidRequest(_))
        ));
    }
}

#[test]
fn wrong_token_is_rejected() {
    let (_sim, _clock, server, _) = pair(3);
    let bad = GitLabClient::new(&server.base_url(), "nope", Duration::from_secs(5));
    assert!(bad.list_projects().is_err());
}

#[test]
fn faults_surface_through_http() {
    let (sim, _clock, _server, client) = pair(3);
    sim.inject_rate_limit(1, Some(Duration::from_secs(7)));
    match client.list_jobs(1, 1, 10, None) {
        Err(AdapterError::RateLimited { retry_after }) => {
            assert_eq!(retry_after, Some(Duration::from_secs(7)))
        }
        other => panic!("expected rate limit, got {other:?}"),
    }
    assert!(client.list_jobs(1, 1, 10, None).is_ok());
    sim.set_unreachable(true);
    assert!(client.list_projects().is_err());
}

#[test]
fn writer_calls_round_trip() {
    let (sim, _clock, _server, client) = pair(10);
    client
        .set_ci_variable(1, "CBDT_CACHE_ENABLED", "true")
        .unwrap();
    assert_eq!(
        sim.variable(1, "CBDT_CACHE_ENABLED").as_deref(),
        Some("true")
    );
    client
        .upsert_file(1, ".cbdt/advisories/a.md", "# advice", "add advisory")
        .unwrap();
    assert_eq!(
        sim.file(1, ".cbdt/advisories/a.md").as_deref(),
        Some("# advice")
    );

    let target = sim
        .jobs()
        .into_iter()
        .find(|j| j.final_status.is_terminal())
        .unwrap();
    let before = sim.jobs().len();
    client.retry_job(1, target.job_id).unwrap();
    let jobs = sim.jobs();
    assert_eq!(jobs.len(), before + 1);
    let rerun = jobs.last().unwrap();
    assert_eq!(
        (rerun.pipeline_id, rerun.name.as_str()),
        (target.pipeline_id, target.name.as_str())
    );
    assert!(matches!(
        client.retry_job(1, 999),
        Err(AdapterError::NotFound(_))
    ));
}

#[test]
fn same_seed_gives_identical_streams() {
    let stream = || {
        let sim = Simulator::new(
            one_project(1, 10.0),
            chrono::Duration::hours(12),
            Arc::new(ManualClock::new(t0())),
        )
        .unwrap();
        serde_json::to_vec(&sim.deliveries()).unwrap()
    };
    assert_eq!(stream(), stream());
}

#[test]
fn history_becomes_visible_as_time_passes() {
    let clock = Arc::new(ManualClock::new(t0()));
    let sim = Simulator::with_jobs(one_project(2, 6.0), 20, clock.clone()).unwrap();
    assert!(sim.list_jobs(1, 1, 100, None).unwrap().records.is_empty());
    let first = sim.jobs()[0].clone();
    clock.set(first.created_at);
    let raw = sim.get_job(1, first.job_id).unwrap();
    assert_eq!(raw["status"], "pending");
    clock.set(first.finished_at);
    let raw = sim.get_job(1, first.job_id).unwrap();
    assert_eq!(raw["status"], first.final_status.as_str());
    assert!(first.final_status != JobStatus::Pending);
}
