//! HTTP surface of the twin.
//!
//! Reads are open. Mutating endpoints require `Authorization: Bearer` with
//! the configured API token, except the job webhook, which authenticates
//! with its own `X-Gitlab-Token` header. Every error is the same envelope:
//! `{code, message, details}`.

mod error;

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use subtle::ConstantTimeEq;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use error::ApiError;

use crate::ingest::{BackfillConfig, TOKEN_HEADER};
use crate::metrics::MetricsError;
use crate::model::{
    ActionStatus, AlertRule, Interval, JobStatus, Scenario, Scope, Timestamp, WhatIfMetric,
};
use crate::store::{JobQuery, SortOrder};
use crate::twin::Twin;
use crate::whatif::Direction;

/// OpenAPI description of this router.
pub const OPENAPI: &str = include_str!("openapi.json");

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
struct AppState {
    twin: Arc<Twin>,
}

/// Runs blocking service code off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

fn parse_time(name: &str, v: &str) -> ApiResult<Timestamp> {
    crate::ingest::parse_timestamp(v)
        .ok_or_else(|| ApiError::bad_request(format!("{name} is not a timestamp: {v:?}")))
}

fn opt_time(q: &HashMap<String, String>, name: &str) -> ApiResult<Option<Timestamp>> {
    q.get(name).map(|v| parse_time(name, v)).transpose()
}

fn opt_num<T: std::str::FromStr>(q: &HashMap<String, String>, name: &str) -> ApiResult<Option<T>> {
    q.get(name)
        .map(|v| {
            v.parse()
                .map_err(|_| ApiError::bad_request(format!("{name} is not a number: {v:?}")))
        })
        .transpose()
}

fn required<'a>(q: &'a HashMap<String, String>, name: &str) -> ApiResult<&'a str> {
    q.get(name)
        .map(String::as_str)
        .ok_or_else(|| ApiError::bad_request(format!("missing query parameter {name}")))
}

fn parse_scope(v: Option<&String>) -> ApiResult<Scope> {
    match v {
        None => Ok(Scope::All),
        Some(s) => {
            Scope::parse(s).ok_or_else(|| ApiError::bad_request(format!("invalid scope {s:?}")))
        }
    }
}

fn parse_interval(v: &str) -> ApiResult<Interval> {
    Interval::parse(v).ok_or_else(|| ApiError::bad_request(format!("invalid interval {v:?}")))
}

fn ids(v: &str) -> ApiResult<Vec<u64>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| ApiError::bad_request(format!("invalid id {s:?}")))
        })
        .collect()
}

/// Rejects mutating requests that lack the API token.
async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let mutating = !matches!(*req.method(), Method::GET | Method::HEAD | Method::OPTIONS);
    let exempt = req.uri().path() == "/webhooks/jobs";
    if mutating && !exempt {
        if let Some(expected) = &state.twin.config.server.api_token {
            let given = req
                .headers()
                .get(header::AUTHORIZATION)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("Bearer "))
                .unwrap_or("");
            let ok =
                !expected.is_empty() && bool::from(given.as_bytes().ct_eq(expected.as_bytes()));
            if !ok {
                return ApiError::unauthorized("missing or invalid API token").into_response();
            }
        }
    }
    next.run(req).await
}

/// Builds the router over a shared twin.
pub fn router(twin: Arc<Twin>) -> Router {
    let origins: Vec<HeaderValue> = twin
        .config
        .server
        .cors_origins
        .iter()
        .filter_map(|o| o.parse().ok())
        .collect();
    let any_origin = twin.config.server.cors_origins.iter().any(|o| o == "*");
    let cors = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST, Method::DELETE, Method::OPTIONS])
        .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE])
        .allow_origin(if any_origin {
            AllowOrigin::any()
        } else {
            AllowOrigin::list(origins)
        });
    let ui_dir = twin.config.server.ui_dir.clone();
    let state = AppState { twin };
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/version", get(version))
        .route("/openapi.json", get(openapi))
        .route("/webhooks/jobs", post(webhook))
        .route("/projects", get(projects))
        .route("/jobs", get(jobs))
        .route("/jobs/:id", get(job))
        .route("/ingest/backfill", post(backfill))
        .route("/ingest/refresh", post(refresh))
        .route("/ingest/dead-letters", get(dead_letters))
        .route("/metrics/series", get(series))
        .route("/metrics/snapshot", get(snapshot))
        .route("/alerts", get(list_alerts).post(add_alert))
        .route("/alerts/firings", get(firings))
        .route("/alerts/:id", delete(delete_alert))
        .route("/predictions", get(predictions))
        .route("/models/snapshots", get(model_snapshots))
        .route("/models/schema", get(schema))
        .route("/anomalies", get(anomalies))
        .route("/whatif/evaluate", post(whatif_evaluate))
        .route("/whatif/compare", post(whatif_compare))
        .route("/actions", get(actions))
        .route("/actions/:id/approve", post(approve))
        .route("/actions/:id/reject", post(reject))
        .route("/actions/:id/reapprove", post(reapprove))
        .route("/actions/:id/apply", post(apply))
        .fallback(|| async { ApiError::not_found("no such endpoint") });
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    app.layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(cors)
        .with_state(state)
}

async fn health(State(s): State<AppState>) -> Response {
    let store_ok = s.twin.store.is_available();
    let bus_ok = s.twin.bus.is_healthy();
    let word = |ok: bool| if ok { "ok" } else { "unavailable" };
    let status = if store_ok && bus_ok {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    let body = json!({
        "status": if store_ok && bus_ok { "ok" } else { "degraded" },
        "store": word(store_ok),
        "bus": word(bus_ok),
    });
    (status, Json(body)).into_response()
}

async fn version() -> Json<Value> {
    Json(json!({ "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") }))
}

async fn openapi() -> Response {
    ([(header::CONTENT_TYPE, "application/json")], OPENAPI).into_response()
}

async fn webhook(
    State(s): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let token = headers.get(TOKEN_HEADER).map(|v| v.as_bytes());
    let event = s.twin.ingest.handle_webhook(token, &body)?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "accepted": true, "job_id": event.job_id, "project_id": event.project_id })),
    )
        .into_response())
}

async fn projects(State(s): State<AppState>) -> Json<Value> {
    let snap = s.twin.store.snapshot();
    Json(json!(snap.projects().collect::<Vec<_>>()))
}

async fn jobs(
    State(s): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let mut query = JobQuery::default();
    if let Some(v) = q.get("project_id") {
        query.project_ids = Some(ids(v)?);
    }
    if let Some(v) = q.get("status") {
        query.statuses = Some(
            v.split(',')
                .map(|st| {
                    JobStatus::ALL
                        .into_iter()
                        .find(|x| x.as_str() == st.trim())
                        .ok_or_else(|| ApiError::bad_request(format!("invalid status {st:?}")))
                })
                .collect::<ApiResult<_>>()?,
        );
    }
    query.git_ref = q.get("ref").cloned();
    query.name = q.get("name").cloned();
    query.flaky = opt_num(&q, "flaky")?;
    query.created_from = opt_time(&q, "created_from")?;
    query.created_to = opt_time(&q, "created_to")?;
    query.finished_from = opt_time(&q, "finished_from")?;
    query.finished_to = opt_time(&q, "finished_to")?;
    query.offset = opt_num(&q, "offset")?.unwrap_or(0);
    query.limit = opt_num(&q, "limit")?.unwrap_or(query.limit);
    query.sort = match q.get("sort").map(String::as_str) {
        None | Some("asc") => SortOrder::Asc,
        Some("desc") => SortOrder::Desc,
        Some(o) => return Err(ApiError::bad_request(format!("invalid sort {o:?}"))),
    };
    let page = s.twin.store.query_jobs(&query)?;
    Ok(Json(json!(page)))
}

async fn job(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    s.twin
        .store
        .get_job(id)
        .map(|j| Json(json!(j)))
        .ok_or_else(|| ApiError::not_found(format!("no job {id}")))
}

async fn backfill(
    State(s): State<AppState>,
    body: Option<Json<BackfillConfig>>,
) -> ApiResult<Json<Value>> {
    let cfg = body.map(|Json(c)| c).unwrap_or_default();
    blocking(move || Ok(Json(json!(s.twin.ingest.backfill(&cfg)?)))).await
}

async fn refresh(State(s): State<AppState>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(json!(s.twin.ingest.refresh_once()?)))).await
}

async fn dead_letters(State(s): State<AppState>) -> Json<Value> {
    Json(json!(s.twin.ingest.dead_letters().recent()))
}

async fn series(
    State(s): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let scope = parse_scope(q.get("scope"))?;
    let interval = parse_interval(required(&q, "interval")?)?;
    let from = parse_time("from", required(&q, "from")?)?;
    let to = parse_time("to", required(&q, "to")?)?;
    let series = s.twin.metrics.series(&scope, interval, from, to)?;
    Ok(Json(json!(*series)))
}

async fn snapshot(
    State(s): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let scope = parse_scope(q.get("scope"))?;
    let interval = parse_interval(required(&q, "interval")?)?;
    let start = parse_time("window_start", required(&q, "window_start")?)?;
    Ok(Json(json!(s
        .twin
        .metrics
        .compute_snapshot(&scope, interval, start)?)))
}

async fn list_alerts(State(s): State<AppState>) -> Json<Value> {
    Json(json!(s.twin.alerts.rules()))
}

async fn add_alert(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let rule: AlertRule =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let rule = s.twin.alerts.add_rule(rule)?;
    Ok((StatusCode::CREATED, Json(json!(rule))).into_response())
}

async fn delete_alert(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    s.twin.alerts.delete_rule(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn firings(
    State(s): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let limit = opt_num(&q, "limit")?.unwrap_or(100usize);
    Ok(Json(json!(s.twin.alerts.firings(limit))))
}

async fn predictions(
    State(s): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let snap = s.twin.store.snapshot();
    let list: Vec<_> = match opt_num::<u64>(&q, "job_id")? {
        Some(id) => snap.predictions_for_job(id).into_iter().cloned().collect(),
        None => {
            let limit = opt_num(&q, "limit")?.unwrap_or(100usize);
            let mut all: Vec<_> = snap.predictions().cloned().collect();
            all.sort_by_key(|p| std::cmp::Reverse(p.prediction_id));
            all.truncate(limit);
            all
        }
    };
    Ok(Json(json!(list)))
}

async fn model_snapshots(State(s): State<AppState>) -> Json<Value> {
    let set = s.twin.models.current();
    Json(json!({
        "models_id": set.id(),
        "schema_version": set.schema.version,
        "snapshots": set.snapshots(),
    }))
}

async fn schema(State(s): State<AppState>) -> Json<Value> {
    Json(json!(s.twin.models.schema()))
}

async fn anomalies(
    State(s): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let (from, to) = (opt_time(&q, "from")?, opt_time(&q, "to")?);
    if let (Some(f), Some(t)) = (from, to) {
        if f > t {
            return Err(MetricsError::InvertedRange.into());
        }
    }
    Ok(Json(json!(s.twin.models.anomalies(from, to))))
}

async fn whatif_evaluate(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let scenario: Scenario =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    blocking(move || Ok(Json(json!(s.twin.whatif.evaluate(&scenario)?)))).await
}

#[derive(Deserialize)]
struct CompareRequest {
    scenarios: Vec<Scenario>,
    #[serde(default = "default_metric")]
    metric: WhatIfMetric,
    #[serde(default)]
    direction: Direction,
}

fn default_metric() -> WhatIfMetric {
    WhatIfMetric::FailureProbability
}

async fn whatif_compare(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: CompareRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if req.scenarios.is_empty() {
        return Err(ApiError::bad_request("at least one scenario required"));
    }
    blocking(move || {
        let ranked = s
            .twin
            .whatif
            .compare(&req.scenarios, req.metric, req.direction)?;
        Ok(Json(json!(ranked)))
    })
    .await
}

async fn actions(
    State(s): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let status = q
        .get("status")
        .map(|v| {
            serde_json::from_value::<ActionStatus>(json!(v))
                .map_err(|_| ApiError::bad_request(format!("invalid status {v:?}")))
        })
        .transpose()?;
    Ok(Json(json!(s.twin.improve.list(status))))
}

async fn approve(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(s.twin.improve.approve(id)?)))
}

async fn reject(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(s.twin.improve.reject(id)?)))
}

async fn reapprove(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(s.twin.improve.reapprove(id)?)))
}

async fn apply(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(json!(s.twin.improve.apply(id)?)))).await
}

/// Binds `addr` and serves until `shutdown` resolves.
pub async fn serve(
    twin: Arc<Twin>,
    addr: std::net::SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(twin))
        .with_graceful_shutdown(shutdown)
        .await
}
