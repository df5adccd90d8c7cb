//! GitLab-shaped REST facade over a [`Simulator`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{ActualTwinReader, ActualTwinWriter, AdapterError, Simulator};
use crate::model::ts;

#[derive(Clone)]
struct AppState {
    sim: Arc<Simulator>,
    token: Option<String>,
}

struct HttpError(AdapterError);

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        let (status, retry_after) = match &self.0 {
            AdapterError::RateLimited { retry_after } => {
                (StatusCode::TOO_MANY_REQUESTS, *retry_after)
            }
            AdapterError::Unreachable(_) => (StatusCode::SERVICE_UNAVAILABLE, None),
            AdapterError::NotFound(_) => (StatusCode::NOT_FOUND, None),
            AdapterError::InvalidRequest(_) => (StatusCode::BAD_REQUEST, None),
            AdapterError::Rejected(_) => (StatusCode::FORBIDDEN, None),
        };
        let mut resp = (status, Json(json!({ "message": self.0.to_string() }))).into_response();
        if let Some(d) = retry_after {
            resp.headers_mut()
                .insert("retry-after", HeaderValue::from(d.as_secs().max(1)));
        }
        resp
    }
}

impl From<AdapterError> for HttpError {
    fn from(e: AdapterError) -> Self {
        HttpError(e)
    }
}

type HttpResult<T> = Result<T, HttpError>;

fn authorize(state: &AppState, headers: &HeaderMap) -> HttpResult<()> {
    let Some(expected) = &state.token else {
        return Ok(());
    };
    let given = headers.get("private-token").and_then(|v| v.to_str().ok());
    if given == Some(expected.as_str()) {
        Ok(())
    } else {
        Err(HttpError(AdapterError::Rejected("401 Unauthorized".into())))
    }
}

fn unauthorized() -> Response {
    (
        StatusCode::UNAUTHORIZED,
        Json(json!({ "message": "401 Unauthorized" })),
    )
        .into_response()
}

macro_rules! guard {
    ($state:expr, $headers:expr) => {
        if authorize(&$state, &$headers).is_err() {
            return unauthorized();
        }
    };
}

/// Router serving the simulator under `/api/v4`. When `token` is set every
/// request must carry it in `PRIVATE-TOKEN`.
pub fn router(sim: Arc<Simulator>, token: Option<String>) -> Router {
    Router::new()
        .route("/api/v4/projects", get(projects))
        .route("/api/v4/projects/:id/jobs", get(jobs))
        .route("/api/v4/projects/:id/jobs/:job_id", get(job))
        .route("/api/v4/projects/:id/jobs/:job_id/retry", post(retry))
        .route("/api/v4/projects/:id/variables", post(create_variable))
        .route(
            "/api/v4/projects/:id/variables/:key",
            axum::routing::put(update_variable),
        )
        .route(
            "/api/v4/projects/:id/repository/files/:path",
            post(create_file).put(update_file),
        )
        .with_state(AppState { sim, token })
}

async fn projects(State(s): State<AppState>, headers: HeaderMap) -> Response {
    guard!(s, headers);
    match s.sim.list_projects() {
        Ok(projects) => {
            let body: Vec<Value> = projects
                .iter()
                .map(|p| {
                    json!({
                        "id": p.project_id,
                        "path_with_namespace": p.path,
                        "default_branch": p.default_ref,
                    })
                })
                .collect();
            Json(body).into_response()
        }
        Err(e) => HttpError(e).into_response(),
    }
}

#[derive(Deserialize)]
struct JobsParams {
    page: Option<u32>,
    per_page: Option<u32>,
    updated_after: Option<String>,
}

async fn jobs(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<u64>,
    Query(q): Query<JobsParams>,
) -> Response {
    guard!(s, headers);
    let updated_after = match q
        .updated_after
        .as_deref()
        .map(chrono::DateTime::parse_from_rfc3339)
    {
        None => None,
        Some(Ok(t)) => Some(t.with_timezone(&chrono::Utc)),
        Some(Err(_)) => {
            return HttpError(AdapterError::InvalidRequest("updated_after".into())).into_response()
        }
    };
    let page = q.page.unwrap_or(1);
    let per_page = q.per_page.unwrap_or(20);
    match s.sim.list_jobs(id, page, per_page, updated_after) {
        Ok(p) => {
            let mut resp = Json(p.records).into_response();
            let h = resp.headers_mut();
            h.insert("x-page", HeaderValue::from(page));
            h.insert("x-per-page", HeaderValue::from(per_page));
            h.insert(
                "x-next-page",
                p.next_page
                    .map(HeaderValue::from)
                    .unwrap_or_else(|| HeaderValue::from_static("")),
            );
            resp
        }
        Err(e) => HttpError(e).into_response(),
    }
}

async fn job(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path((id, job_id)): Path<(u64, u64)>,
) -> Response {
    guard!(s, headers);
    match s.sim.get_job(id, job_id) {
        Ok(raw) => Json(raw).into_response(),
        Err(e) => HttpError(e).into_response(),
    }
}

async fn retry(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path((id, job_id)): Path<(u64, u64)>,
) -> Response {
    guard!(s, headers);
    let result = s.sim.retry_job(id, job_id).and_then(|new_id| {
        let new_id: u64 = new_id.parse().expect("simulator job ids are numeric");
        s.sim.get_job(id, new_id)
    });
    match result {
        Ok(raw) => (StatusCode::CREATED, Json(raw)).into_response(),
        Err(e) => HttpError(e).into_response(),
    }
}

#[derive(Deserialize)]
struct VariableBody {
    key: Option<String>,
    value: String,
}

async fn create_variable(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<u64>,
    Json(body): Json<VariableBody>,
) -> Response {
    guard!(s, headers);
    let Some(key) = body.key else {
        return HttpError(AdapterError::InvalidRequest("key is missing".into())).into_response();
    };
    if s.sim.variable(id, &key).is_some() {
        return HttpError(AdapterError::InvalidRequest(format!(
            "{key} has already been taken"
        )))
        .into_response();
    }
    variable_response(&s, id, &key, &body.value, StatusCode::CREATED)
}

async fn update_variable(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path((id, key)): Path<(u64, String)>,
    Json(body): Json<VariableBody>,
) -> Response {
    guard!(s, headers);
    if s.sim.variable(id, &key).is_none() {
        return HttpError(AdapterError::NotFound(format!("variable {key}"))).into_response();
    }
    variable_response(&s, id, &key, &body.value, StatusCode::OK)
}

fn variable_response(
    s: &AppState,
    id: u64,
    key: &str,
    value: &str,
    status: StatusCode,
) -> Response {
    match s.sim.set_ci_variable(id, key, value) {
        Ok(_) => (status, Json(json!({ "key": key, "value": value }))).into_response(),
        Err(e) => HttpError(e).into_response(),
    }
}

#[derive(Deserialize)]
struct FileBody {
    #[serde(default)]
    branch: Option<String>,
    content: String,
    commit_message: String,
}

async fn create_file(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path((id, path)): Path<(u64, String)>,
    Json(body): Json<FileBody>,
) -> Response {
    guard!(s, headers);
    if s.sim.file(id, &path).is_some() {
        return HttpError(AdapterError::InvalidRequest(
            "A file with this name already exists".into(),
        ))
        .into_response();
    }
    file_response(&s, id, &path, body, StatusCode::CREATED)
}

async fn update_file(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path((id, path)): Path<(u64, String)>,
    Json(body): Json<FileBody>,
) -> Response {
    guard!(s, headers);
    if s.sim.file(id, &path).is_none() {
        return HttpError(AdapterError::InvalidRequest(
            "A file with this name doesn't exist".into(),
        ))
        .into_response();
    }
    file_response(&s, id, &path, body, StatusCode::OK)
}

fn file_response(
    s: &AppState,
    id: u64,
    path: &str,
    body: FileBody,
    status: StatusCode,
) -> Response {
    match s
        .sim
        .upsert_file(id, path, &body.content, &body.commit_message)
    {
        Ok(rev) => (
            status,
            Json(json!({
                "file_path": path,
                "branch": body.branch.unwrap_or_else(|| "main".into()),
                "revision": rev,
                "committed_at": ts::format(&s.sim.now()),
            })),
        )
            .into_response(),
        Err(e) => HttpError(e).into_response(),
    }
}

/// A simulator server on its own runtime thread; stopped on drop.
pub struct SimServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl SimServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves in the background.
    pub fn start(
        sim: Arc<Simulator>,
        token: Option<String>,
        addr: SocketAddr,
    ) -> std::io::Result<SimServer> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(sim, token);
        let thread = std::thread::Builder::new()
            .name("sim-http".into())
            .spawn(move || {
                let rt = tokio::runtime::Builder::new_multi_thread()
                    .worker_threads(2)
                    .enable_all()
                    .build()
                    .expect("tokio runtime");
                rt.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                    let _ = axum::serve(listener, app)
                        .with_graceful_shutdown(async {
                            let _ = rx.await;
                        })
                        .await;
                });
            })?;
        Ok(SimServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for SimServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
