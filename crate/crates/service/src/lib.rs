//! HTTP and ND-JSON front end for the desk robot.
//!
//! One [`Session`] holds the operator's state; every mutating request takes
//! its lock, so requests are handled concurrently but applied one at a time.
//! Events are fanned out to any number of `/stream` subscribers.

pub mod config;
pub mod session;

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Body;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::StreamExt;
use hrc_core::correction::{GripperAction, OverrideRegistry};
use hrc_core::dmp::DmpConfig;
use hrc_core::metrics::{render_report, run_suite, MetricsRow, ReportFormat, Suite};
use hrc_core::ConfigError;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast;

pub use config::{BackendKind, ServiceConfig};
pub use session::{Mode, Session, SessionError, StreamEvent};

const EVENT_BUFFER: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("overrides: {0}")]
    Overrides(String),
    #[error("metrics: {0}")]
    Metrics(#[from] hrc_core::metrics::MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

struct Shared {
    session: Mutex<Session>,
    events: broadcast::Sender<StreamEvent>,
    overrides: OverrideRegistry,
    config: ServiceConfig,
    base_dir: PathBuf,
    latest_metrics: Mutex<Option<String>>,
}

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    /// Builds the session from `config`. Relative suite paths sent to
    /// `/metrics/run` resolve against `base_dir`.
    pub fn new(config: ServiceConfig, base_dir: PathBuf) -> Result<Self, ServiceError> {
        let overrides = match &config.overrides_path {
            Some(p) if p.exists() => {
                OverrideRegistry::load(p).map_err(|e| ServiceError::Overrides(e.to_string()))?
            }
            _ => OverrideRegistry::new(),
        };
        config.detector.validate()?;
        let session = Session::new(
            config.load_scene()?,
            config.robot.clone(),
            config.detector.clone(),
            config.build_backend()?,
            overrides.clone(),
            config.seed,
            config.snapshot_every_ticks,
        );
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        Ok(Self {
            shared: Arc::new(Shared {
                session: Mutex::new(session),
                events,
                overrides,
                config,
                base_dir,
                latest_metrics: Mutex::new(None),
            }),
        })
    }

    pub fn overrides(&self) -> &OverrideRegistry {
        &self.shared.overrides
    }

    fn session(&self) -> MutexGuard<'_, Session> {
        self.shared
            .session
            .lock()
            .unwrap_or_else(|e| e.into_inner())
    }

    fn publish(&self, event: StreamEvent) {
        // No subscribers is fine.
        let _ = self.shared.events.send(event);
    }

    fn persist_overrides(&self) -> Result<(), ApiError> {
        if let Some(path) = &self.shared.config.overrides_path {
            self.shared
                .overrides
                .save(path)
                .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        }
        Ok(())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/command", post(submit_command))
        .route("/plan/{id}", get(get_plan))
        .route("/plan/{id}/approve", post(approve_plan))
        .route("/plan/{id}/reject", post(reject_plan))
        .route("/registry", get(get_registry))
        .route("/overrides", get(get_overrides))
        .route("/teleop/begin", post(teleop_begin))
        .route("/teleop/sample", post(teleop_sample))
        .route("/teleop/finish", post(teleop_finish))
        .route("/teleop/abort", post(teleop_abort))
        .route("/metrics/run", post(metrics_run))
        .route("/metrics/latest", get(metrics_latest))
        .route("/stream", get(stream))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::Conflict(_) => StatusCode::CONFLICT,
            SessionError::NotFound(_) => StatusCode::NOT_FOUND,
            SessionError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn ndjson_line(event: &StreamEvent) -> String {
    let mut line = serde_json::to_string(event).expect("events serialize");
    line.push('\n');
    line
}

#[derive(Deserialize)]
struct CommandRequest {
    text: String,
}

async fn submit_command(
    State(app): State<AppState>,
    Json(req): Json<CommandRequest>,
) -> ApiResult<Response> {
    let mut session = app.session();
    let plan = session.submit_command(&req.text, &mut |e| app.publish(e))?;
    Ok(Json(json!({ "plan_id": plan.id, "plan": plan })).into_response())
}

async fn get_plan(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let session = app.session();
    let plan = session
        .plan(&id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no plan `{id}`")))?;
    Ok(Json(plan).into_response())
}

/// Executes the plan and answers with its step results and report as
/// ND-JSON, the same events `/stream` subscribers see.
async fn approve_plan(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let mut body = String::new();
    {
        let mut session = app.session();
        session.approve(&id, &mut |e| {
            if matches!(
                e,
                StreamEvent::StepResult { .. } | StreamEvent::Report { .. }
            ) {
                body.push_str(&ndjson_line(&e));
            }
            app.publish(e);
        })?;
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn reject_plan(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let mut session = app.session();
    session.reject(&id)?;
    app.publish(session.snapshot());
    Ok(Json(json!({ "mode": session.mode() })).into_response())
}

async fn get_registry(State(app): State<AppState>) -> Response {
    let session = app.session();
    let registry = session.registry();
    let entries: Vec<_> = registry
        .entries()
        .map(|(label, e)| {
            json!({
                "label": label,
                "registered_at": e.registered_at,
                "current_pose": e.current_pose,
                "last_update": e.last_update,
            })
        })
        .collect();
    Json(json!({ "entries": entries, "stale_detections": registry.stale_detections() }))
        .into_response()
}

async fn get_overrides(State(app): State<AppState>) -> Response {
    let overrides = app.overrides();
    let list: Vec<_> = overrides
        .keys()
        .into_iter()
        .filter_map(|k| overrides.get(&k).map(|v| (k, v)))
        .map(|(k, v)| {
            json!({
                "function": k.function,
                "shape": k.shape,
                "tau": v.model.tau,
                "n_basis": v.model.n_basis(),
                "y0": v.model.y0,
                "g": v.model.g,
                "gripper_events": v.gripper_events,
            })
        })
        .collect();
    Json(json!({ "overrides": list })).into_response()
}

#[derive(Deserialize)]
struct TeleopBegin {
    function: String,
    target: String,
}

async fn teleop_begin(
    State(app): State<AppState>,
    Json(req): Json<TeleopBegin>,
) -> ApiResult<Response> {
    let mut session = app.session();
    let started = session.begin_teleop(&req.function, &req.target)?;
    app.publish(session.snapshot());
    Ok(Json(started).into_response())
}

#[derive(Deserialize)]
struct TeleopSample {
    #[serde(default)]
    session_id: Option<u64>,
    x: f64,
    y: f64,
    t: f64,
    #[serde(default)]
    gripper: Option<GripperAction>,
}

async fn teleop_sample(
    State(app): State<AppState>,
    Json(req): Json<TeleopSample>,
) -> ApiResult<Response> {
    let mut session = app.session();
    session.teleop_sample(
        req.session_id,
        (req.x, req.y),
        req.t,
        req.gripper,
        &mut |e| app.publish(e),
    )?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

#[derive(Deserialize, Default)]
struct TeleopEnd {
    #[serde(default)]
    session_id: Option<u64>,
}

async fn teleop_finish(
    State(app): State<AppState>,
    body: Option<Json<TeleopEnd>>,
) -> ApiResult<Response> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let summary = {
        let mut session = app.session();
        let result = session.finish_teleop(req.session_id, &DmpConfig::default());
        app.publish(session.snapshot());
        result?
    };
    app.persist_overrides()?;
    Ok(Json(summary).into_response())
}

async fn teleop_abort(
    State(app): State<AppState>,
    body: Option<Json<TeleopEnd>>,
) -> ApiResult<Response> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let mut session = app.session();
    session.abort_teleop(req.session_id)?;
    app.publish(session.snapshot());
    Ok(Json(json!({ "mode": session.mode() })).into_response())
}

#[derive(Deserialize)]
struct MetricsRun {
    #[serde(default)]
    suite: Option<Suite>,
    #[serde(default)]
    suite_path: Option<PathBuf>,
}

#[derive(Serialize)]
struct MetricsRunResponse {
    rows: Vec<MetricsRow>,
    csv: String,
}

/// Runs an experiment suite against the current overrides. Trials use
/// their own worlds, so the session is left untouched.
async fn metrics_run(
    State(app): State<AppState>,
    Json(req): Json<MetricsRun>,
) -> ApiResult<Response> {
    let bad = |m: String| ApiError(StatusCode::UNPROCESSABLE_ENTITY, m);
    let (suite, base) = match (req.suite, req.suite_path) {
        (Some(s), None) => (s, app.shared.base_dir.clone()),
        (None, Some(p)) => {
            let p = if p.is_relative() {
                app.shared.base_dir.join(p)
            } else {
                p
            };
            let suite = Suite::load(&p).map_err(|e| bad(e.to_string()))?;
            (suite, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        _ => return Err(bad("send exactly one of `suite` or `suite_path`".into())),
    };
    let overrides = app.overrides().clone();
    let rows = tokio::task::spawn_blocking(move || -> Result<Vec<MetricsRow>, String> {
        let experiments = suite.prepare(&base).map_err(|e| e.to_string())?;
        run_suite(&experiments, &overrides).map_err(|e| e.to_string())
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(bad)?;
    let csv = render_report(&rows, ReportFormat::Csv).map_err(|e| bad(e.to_string()))?;
    if let Some(path) = &app.shared.config.metrics_path {
        std::fs::write(path, &csv)
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    }
    *app.shared
        .latest_metrics
        .lock()
        .unwrap_or_else(|e| e.into_inner()) = Some(csv.clone());
    Ok(Json(MetricsRunResponse { rows, csv }).into_response())
}

async fn metrics_latest(State(app): State<AppState>) -> ApiResult<Response> {
    let latest = app
        .shared
        .latest_metrics
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .clone();
    let csv =
        latest.ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "no metrics have been run".into()))?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

/// Persistent ND-JSON feed. Opens with the current world snapshot; lagging
/// subscribers skip what they missed.
async fn stream(State(app): State<AppState>) -> Response {
    // Subscribe under the session lock so nothing older than the opening
    // snapshot can follow it.
    let (first, rx) = {
        let session = app.session();
        (session.snapshot(), app.shared.events.subscribe())
    };
    let opening = futures::stream::once(async move { Ok::<_, Infallible>(ndjson_line(&first)) });
    let live = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(event) => return Some((Ok(ndjson_line(&event)), rx)),
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(opening.chain(live)))
        .expect("static response parts")
}

/// Serves until ctrl-c.
pub async fn serve(config: ServiceConfig, base_dir: PathBuf) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(&config.bind).await?;
    let app = router(AppState::new(config, base_dir)?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// A server running on its own thread and runtime, for tests and embedding.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    pub state: AppState,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(config: ServiceConfig, base_dir: PathBuf) -> Result<Self, ServiceError> {
        let state = AppState::new(config.clone(), base_dir)?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(&config.bind))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(state.clone());
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr,
            state,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        // Open /stream connections keep the server alive; don't wait on them.
        drop(self.thread.take());
    }
}

/// Loads a suite file, resolving its relative paths against its directory,
/// and runs it.
pub fn run_suite_file(
    path: &Path,
    overrides: &OverrideRegistry,
) -> Result<Vec<MetricsRow>, ServiceError> {
    let suite = Suite::load(path)?;
    let experiments = suite.prepare(path.parent().unwrap_or(Path::new(".")))?;
    Ok(run_suite(&experiments, overrides)?)
}
