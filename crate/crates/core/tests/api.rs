mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use cbdt::api;
use cbdt::config::Config;
use cbdt::improve::Trigger;
use cbdt::ingest::TOKEN_HEADER;
use cbdt::model::{ModelKind, PredictionRecord};
use cbdt::models::PredictionContext;
use cbdt::ops;
use cbdt::twin::Twin;
use http_body_util::BodyExt;
use jsonschema::JSONSchema;
use serde_json::{json, Value};
use tower::ServiceExt;

const ADMIN: &str = "admin-token";

struct Harness {
    rt: tokio::runtime::Runtime,
    app: Router,
    twin: Arc<Twin>,
    sim: Arc<cbdt::adapters::Simulator>,
    openapi: Value,
}

impl Harness {
    fn new() -> Self {
        let mut config = Config::default();
        config.adapter.history_jobs = Some(200);
        config.server.api_token = Some(ADMIN.into());
        let (twin, sim, clock) = ops::simulation(config).unwrap();
        clock.set(sim.end() + chrono::Duration::hours(1));
        let twin = Arc::new(twin);
        Harness {
            rt: tokio::runtime::Runtime::new().unwrap(),
            app: api::router(twin.clone()),
            twin,
            sim,
            openapi: serde_json::from_str(include_str!("../src/api/openapi.json")).unwrap(),
        }
    }

    fn send(
        &self,
        method: Method,
        uri: &str,
        body: Option<Value>,
        headers: &[(&str, &str)],
    ) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let body = match body {
            Some(b) => {
                req = req.header("content-type", "application/json");
                Body::from(b.to_string())
            }
            None => Body::empty(),
        };
        let resp = self
            .rt
            .block_on(self.app.clone().oneshot(req.body(body).unwrap()))
            .unwrap();
        let status = resp.status();
        let bytes = self
            .rt
            .block_on(resp.into_body().collect())
            .unwrap()
            .to_bytes();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap()
        };
        (status, value)
    }

    fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.send(Method::GET, uri, None, &[])
    }

    fn admin(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        self.send(
            method,
            uri,
            body,
            &[("authorization", "Bearer admin-token")],
        )
    }

    /// Asserts that `body` matches the documented response of `path` for
    /// `status`; error statuses must carry the error envelope.
    fn conforms(&self, method: &str, path: &str, status: StatusCode, body: &Value) {
        let op = &self.openapi["paths"][path][method];
        assert!(op.is_object(), "{method} {path} is not documented");
        let response = &op["responses"][status.as_str()];
        assert!(
            response.is_object(),
            "{method} {path} does not document {status}"
        );
        let schema = match response.pointer("/content/application~1json/schema") {
            Some(s) => s.clone(),
            None if status.is_client_error() || status.is_server_error() => {
                json!({"$ref": "#/components/schemas/Error"})
            }
            None => return,
        };
        let mut doc = schema.as_object().unwrap().clone();
        doc.insert("components".into(), self.openapi["components"].clone());
        let compiled = JSONSchema::options()
            .with_draft(jsonschema::Draft::Draft202012)
            .compile(&Value::Object(doc))
            .expect("schema compiles");
        if let Err(errors) = compiled.validate(body) {
            let errors: Vec<String> = errors
                .map(|e| format!("{} at {}", e, e.instance_path))
                .collect();
            panic!("{method} {path} {status}: {errors:#?}\n{body:#}");
        };
    }
}

fn expect(
    h: &Harness,
    method: &str,
    path: &str,
    got: (StatusCode, Value),
    want: StatusCode,
) -> Value {
    assert_eq!(got.0, want, "{method} {path}: {:#}", got.1);
    h.conforms(method, path, got.0, &got.1);
    got.1
}

#[test]
fn responses_follow_the_contract() {
    let h = Harness::new();
    expect(&h, "get", "/health", h.get("/health"), StatusCode::OK);
    expect(&h, "get", "/version", h.get("/version"), StatusCode::OK);
    let (_, doc) = h.get("/openapi.json");
    assert_eq!(doc, h.openapi);

    expect(
        &h,
        "post",
        "/ingest/backfill",
        h.send(Method::POST, "/ingest/backfill", Some(json!({})), &[]),
        StatusCode::UNAUTHORIZED,
    );
    let summary = expect(
        &h,
        "post",
        "/ingest/backfill",
        h.admin(
            Method::POST,
            "/ingest/backfill",
            Some(json!({"max_jobs_per_project": 80})),
        ),
        StatusCode::OK,
    );
    assert!(summary["stored"].as_u64().unwrap() > 0);
    h.twin.pump();
    expect(
        &h,
        "post",
        "/ingest/refresh",
        h.admin(Method::POST, "/ingest/refresh", None),
        StatusCode::OK,
    );
    expect(
        &h,
        "get",
        "/ingest/dead-letters",
        h.get("/ingest/dead-letters"),
        StatusCode::OK,
    );

    let projects = expect(&h, "get", "/projects", h.get("/projects"), StatusCode::OK);
    assert_eq!(projects.as_array().unwrap().len(), 2);
    let page = expect(
        &h,
        "get",
        "/jobs",
        h.get("/jobs?project_id=1&limit=5&sort=desc"),
        StatusCode::OK,
    );
    let id = page["jobs"][0]["job_id"].as_u64().unwrap();
    expect(
        &h,
        "get",
        "/jobs",
        h.get("/jobs?status=bogus"),
        StatusCode::BAD_REQUEST,
    );
    expect(
        &h,
        "get",
        "/jobs/{id}",
        h.get(&format!("/jobs/{id}")),
        StatusCode::OK,
    );
    let missing = expect(
        &h,
        "get",
        "/jobs/{id}",
        h.get("/jobs/999999999"),
        StatusCode::NOT_FOUND,
    );
    assert_eq!(missing["code"], "NOT_FOUND");

    let from = "2024-01-01T00:00:00Z";
    let to = "2024-01-08T00:00:00Z";
    let series = expect(
        &h,
        "get",
        "/metrics/series",
        h.get(&format!(
            "/metrics/series?interval=daily&scope=1,2&from={from}&to={to}"
        )),
        StatusCode::OK,
    );
    assert_eq!(series.as_array().unwrap().len(), 7);
    let inverted = expect(
        &h,
        "get",
        "/metrics/series",
        h.get(&format!(
            "/metrics/series?interval=daily&from={to}&to={from}"
        )),
        StatusCode::BAD_REQUEST,
    );
    assert_eq!(inverted["code"], "INVERTED_RANGE");
    expect(
        &h,
        "get",
        "/metrics/snapshot",
        h.get(&format!(
            "/metrics/snapshot?interval=hourly&window_start={from}"
        )),
        StatusCode::OK,
    );
    let unaligned = expect(
        &h,
        "get",
        "/metrics/snapshot",
        h.get("/metrics/snapshot?interval=daily&window_start=2024-01-01T03:00:00Z"),
        StatusCode::BAD_REQUEST,
    );
    assert_eq!(unaligned["code"], "UNALIGNED_WINDOW");

    let rule = json!({"metric": "mean_duration", "scope": {"projects": [1]}, "interval": "hourly", "comparator": ">", "threshold": 600.0});
    let created = expect(
        &h,
        "post",
        "/alerts",
        h.admin(Method::POST, "/alerts", Some(rule)),
        StatusCode::CREATED,
    );
    let bad = json!({"metric": "failure_ratio", "scope": "all", "interval": "hourly", "comparator": ">", "threshold": 3.0});
    expect(
        &h,
        "post",
        "/alerts",
        h.admin(Method::POST, "/alerts", Some(bad)),
        StatusCode::BAD_REQUEST,
    );
    expect(&h, "get", "/alerts", h.get("/alerts"), StatusCode::OK);
    expect(
        &h,
        "get",
        "/alerts/firings",
        h.get("/alerts/firings"),
        StatusCode::OK,
    );
    let rule_path = format!("/alerts/{}", created["rule_id"].as_str().unwrap());
    expect(
        &h,
        "delete",
        "/alerts/{id}",
        h.admin(Method::DELETE, &rule_path, None),
        StatusCode::NO_CONTENT,
    );
    expect(
        &h,
        "delete",
        "/alerts/{id}",
        h.admin(Method::DELETE, &rule_path, None),
        StatusCode::NOT_FOUND,
    );

    let preds = expect(
        &h,
        "get",
        "/predictions",
        h.get(&format!("/predictions?job_id={id}")),
        StatusCode::OK,
    );
    assert_eq!(preds.as_array().unwrap().len(), 3);
    let snaps = expect(
        &h,
        "get",
        "/models/snapshots",
        h.get("/models/snapshots"),
        StatusCode::OK,
    );
    assert!(snaps["models_id"].as_str().unwrap().starts_with("models@"));
    expect(
        &h,
        "get",
        "/models/schema",
        h.get("/models/schema"),
        StatusCode::OK,
    );
    expect(&h, "get", "/anomalies", h.get("/anomalies"), StatusCode::OK);

    let identity = json!({"label": "identity", "feature_deltas": {}, "job_sample_spec": {"scope": "all", "trailing_jobs": 50}});
    let report = expect(
        &h,
        "post",
        "/whatif/evaluate",
        h.admin(Method::POST, "/whatif/evaluate", Some(identity.clone())),
        StatusCode::OK,
    );
    assert!(report["metrics"]
        .as_object()
        .unwrap()
        .values()
        .all(|e| e["delta"] == 0.0));
    let calm = json!({"label": "calm", "feature_deltas": {"recent_failure_rate": {"set": 0.0}}, "job_sample_spec": {"scope": "all", "trailing_jobs": 50}});
    let ranked = expect(
        &h,
        "post",
        "/whatif/compare",
        h.admin(
            Method::POST,
            "/whatif/compare",
            Some(json!({"scenarios": [identity, calm]})),
        ),
        StatusCode::OK,
    );
    assert_eq!(ranked[0]["rank"], 1);
    let unknown = json!({"label": "x", "feature_deltas": {"colour": {"add": 1.0}}});
    let err = expect(
        &h,
        "post",
        "/whatif/evaluate",
        h.admin(Method::POST, "/whatif/evaluate", Some(unknown)),
        StatusCode::BAD_REQUEST,
    );
    assert_eq!(err["code"], "UNKNOWN_FEATURE");

    let job = h.twin.store.get_job(id).unwrap();
    let trigger = Trigger::Prediction(PredictionContext {
        record: PredictionRecord {
            prediction_id: 0,
            job_id: id,
            model_kind: ModelKind::Duration,
            predicted_value: 900.0,
            log_sigma: None,
            model_snapshot_id: "test".into(),
            predicted_at: job.created_at,
            actual_value: None,
            anomaly: None,
            anomaly_score: None,
        },
        job,
        attributions: Vec::new(),
    });
    let action = h.twin.improve.propose(&trigger).unwrap().remove(0);
    let listed = expect(
        &h,
        "get",
        "/actions",
        h.get("/actions?status=proposed"),
        StatusCode::OK,
    );
    assert!(listed
        .as_array()
        .unwrap()
        .iter()
        .any(|a| a["action_id"] == action.action_id));
    let base = format!("/actions/{}", action.action_id);
    let conflict = expect(
        &h,
        "post",
        "/actions/{id}/apply",
        h.admin(Method::POST, &format!("{base}/apply"), None),
        StatusCode::CONFLICT,
    );
    assert_eq!(conflict["code"], "ILLEGAL_TRANSITION");
    expect(
        &h,
        "post",
        "/actions/{id}/approve",
        h.admin(Method::POST, &format!("{base}/approve"), None),
        StatusCode::OK,
    );
    let applied = expect(
        &h,
        "post",
        "/actions/{id}/apply",
        h.admin(Method::POST, &format!("{base}/apply"), None),
        StatusCode::OK,
    );
    assert_eq!(applied["status"], "applied");
    assert_eq!(
        h.sim
            .variable(job_project(&applied), "CBDT_CACHE_ENABLED")
            .as_deref(),
        Some("true")
    );
    expect(
        &h,
        "post",
        "/actions/{id}/reject",
        h.admin(Method::POST, &format!("{base}/reject"), None),
        StatusCode::CONFLICT,
    );
    expect(
        &h,
        "post",
        "/actions/{id}/reapprove",
        h.admin(Method::POST, &format!("{base}/reapprove"), None),
        StatusCode::CONFLICT,
    );
    expect(
        &h,
        "post",
        "/actions/{id}/approve",
        h.admin(Method::POST, "/actions/424242/approve", None),
        StatusCode::NOT_FOUND,
    );
}

fn job_project(action: &Value) -> u64 {
    action["target"]["project_id"].as_u64().unwrap()
}

#[test]
fn webhook_endpoint() {
    let h = Harness::new();
    let delivery = h.sim.deliveries().remove(0);
    let post = |token: Option<&str>, body: &str| {
        let headers: Vec<(&str, &str)> = token.map(|t| vec![(TOKEN_HEADER, t)]).unwrap_or_default();
        let mut req = Request::post("/webhooks/jobs").header("content-type", "application/json");
        for (k, v) in headers {
            req = req.header(k, v);
        }
        let resp =
            h.rt.block_on(
                h.app
                    .clone()
                    .oneshot(req.body(Body::from(body.to_string())).unwrap()),
            )
            .unwrap();
        let status = resp.status();
        let bytes =
            h.rt.block_on(resp.into_body().collect())
                .unwrap()
                .to_bytes();
        (status, serde_json::from_slice::<Value>(&bytes).unwrap())
    };
    let version = h.twin.store.snapshot().version();
    expect(
        &h,
        "post",
        "/webhooks/jobs",
        post(None, &delivery.body),
        StatusCode::UNAUTHORIZED,
    );
    expect(
        &h,
        "post",
        "/webhooks/jobs",
        post(Some("nope"), &delivery.body),
        StatusCode::UNAUTHORIZED,
    );
    assert_eq!(h.twin.store.snapshot().version(), version);
    let malformed = expect(
        &h,
        "post",
        "/webhooks/jobs",
        post(Some(&delivery.token), "{}"),
        StatusCode::BAD_REQUEST,
    );
    assert_eq!(malformed["code"], "MALFORMED_EVENT");
    let accepted = expect(
        &h,
        "post",
        "/webhooks/jobs",
        post(Some(&delivery.token), &delivery.body),
        StatusCode::ACCEPTED,
    );
    assert_eq!(accepted["job_id"], delivery.job_id);
    h.twin.pump();
    assert!(h.twin.store.get_job(delivery.job_id).is_some());
}

#[test]
fn health_reports_store_outage() {
    let h = Harness::new();
    h.twin.store.set_unavailable(true);
    let (status, body) = h.get("/health");
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    h.conforms("get", "/health", status, &body);
    let (status, body) = h.admin(Method::POST, "/ingest/backfill", Some(json!({})));
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{body}");
    assert_eq!(body["code"], "STORE_UNAVAILABLE");
    assert!(h.twin.store.get_job(1).is_none());
}

#[test]
fn schema_check_rejects_wrong_shapes() {
    let h = Harness::new();
    let (status, mut page) = h.get("/jobs?limit=2");
    h.conforms("get", "/jobs", status, &page);
    page["jobs"] = json!([{"job_id": "seven"}]);
    let bad = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        h.conforms("get", "/jobs", status, &page)
    }));
    assert!(bad.is_err());
    let envelope = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        h.conforms(
            "get",
            "/jobs/{id}",
            StatusCode::NOT_FOUND,
            &json!({"error": "x"}),
        )
    }));
    assert!(envelope.is_err());
}
