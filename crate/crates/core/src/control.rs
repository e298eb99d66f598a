//! HTTP control plane.
//!
//! The engine runs on its own thread and is the only owner of simulation
//! state. HTTP handlers read a snapshot the engine publishes after every
//! step, and turn every mutation into a [`ControlCommand`] sent to the
//! engine, which validates it and applies it at the next quantum boundary.
//!
//! | Method | Path | Body | Reply |
//! |---|---|---|---|
//! | GET | `/status` | | [`StatusView`] |
//! | GET | `/metrics?since=N` | | `{since, next, records}` |
//! | GET | `/events?since=N` | | `{since, next, records}` |
//! | GET | `/resources` | | `[CliqueView]` |
//! | POST | `/contract` | `{run_id?, quantum_seconds?, degradation_threshold?, consecutive_required?}` | ack |
//! | POST | `/migrate` | `{run_id?, target?}` or empty | ack |
//! | POST | `/pause`, `/resume` | `{run_id?}` or empty | ack |
//! | POST | `/select` | request ad text, or empty for the run's own ad | selection record |
//!
//! Every body is JSON (`application/json`) except the `/select` request,
//! which is ClassAd text. An ack is `{"accepted": true, "run_id": ...}`;
//! rejections are `{"error": ...}` with status 404 (unknown run or clique),
//! 409 (run not in a state to accept it, or a read-only replay) or 422
//! (invalid parameters or target).

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::contract::ContractParams;
use crate::events::{EventTag, LogEvent};
use crate::migrator::RunStatus;
use crate::selector::{SelectionRecord, SelectionResponse};
use crate::sim::{
    CliqueView, CommandError, ControlCommand, Engine, MetricsRecord, ParamsUpdate, RunView, ScenarioOutcome, SimError,
    StatusView,
};

/// What readers see: consistent as of the engine's last processed event.
#[derive(Debug, Clone, Default)]
pub struct Published {
    pub status: Option<StatusView>,
    pub resources: Vec<CliqueView>,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<LogEvent>,
}

enum Request {
    Command(ControlCommand, oneshot::Sender<Result<String, CommandError>>),
    Select(Option<String>, oneshot::Sender<SelectionResponse>),
    AdvanceTo(f64, oneshot::Sender<f64>),
}

/// How the engine thread moves simulated time forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pace {
    /// Simulated seconds follow wall-clock seconds times `time_scale`.
    WallClock { time_scale: f64 },
    /// Time moves only on [`ControlState::advance_to`].
    Manual,
}

#[derive(Clone)]
pub struct ControlState {
    published: Arc<RwLock<Published>>,
    requests: Option<mpsc::Sender<Request>>,
}

impl ControlState {
    pub fn is_read_only(&self) -> bool {
        self.requests.is_none()
    }

    pub fn snapshot<T>(&self, f: impl FnOnce(&Published) -> T) -> T {
        f(&self.published.read().expect("publisher never panics while holding the lock"))
    }

    async fn ask<T>(&self, build: impl FnOnce(oneshot::Sender<T>) -> Request) -> Option<T> {
        let tx = self.requests.as_ref()?;
        let (reply, rx) = oneshot::channel();
        tx.send(build(reply)).ok()?;
        rx.await.ok()
    }

    /// Validates and queues a command. `None` when there is no engine
    /// (replay) or it has shut down.
    pub async fn submit(&self, cmd: ControlCommand) -> Option<Result<String, CommandError>> {
        self.ask(|r| Request::Command(cmd, r)).await
    }

    /// Manual pacing: processes every event up to `t`, returns the new time.
    pub async fn advance_to(&self, t: f64) -> Option<f64> {
        self.ask(|r| Request::AdvanceTo(t, r)).await
    }

    pub async fn select(&self, request_text: Option<String>) -> Option<SelectionResponse> {
        self.ask(|r| Request::Select(request_text, r)).await
    }
}

fn publish(engine: &Engine, published: &RwLock<Published>) {
    let mut p = published.write().expect("readers never panic while holding the lock");
    let (m, e) = (p.metrics.len(), p.events.len());
    p.metrics.extend_from_slice(engine.metrics_since(m));
    p.events.extend_from_slice(engine.events_since(e));
    p.status = Some(engine.status());
    p.resources = engine.resources();
}

/// Moves the engine onto its own thread. The thread ends once every
/// [`ControlState`] clone is dropped and returns the scenario outcome.
pub fn spawn_engine(engine: Engine, pace: Pace) -> (ControlState, JoinHandle<Result<ScenarioOutcome, SimError>>) {
    let published = Arc::new(RwLock::new(Published::default()));
    let (tx, rx) = mpsc::channel::<Request>();
    let shared = published.clone();
    let handle = std::thread::spawn(move || drive(engine, pace, rx, &shared));
    (ControlState { published, requests: Some(tx) }, handle)
}

fn drive(
    mut engine: Engine,
    pace: Pace,
    rx: mpsc::Receiver<Request>,
    published: &RwLock<Published>,
) -> Result<ScenarioOutcome, SimError> {
    let started = Instant::now();
    publish(&engine, published);
    loop {
        if let Pace::WallClock { time_scale } = pace {
            engine.run_until(started.elapsed().as_secs_f64() * time_scale)?;
            publish(&engine, published);
        }
        let request = match pace {
            Pace::WallClock { .. } if !engine.is_finished() => match rx.recv_timeout(Duration::from_millis(20)) {
                Ok(r) => r,
                Err(mpsc::RecvTimeoutError::Timeout) => continue,
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            },
            _ => match rx.recv() {
                Ok(r) => r,
                Err(_) => break,
            },
        };
        match request {
            Request::Command(cmd, reply) => {
                let _ = reply.send(engine.submit(cmd));
            }
            Request::Select(text, reply) => {
                let _ = reply.send(engine.preview_selection(text.as_deref()));
            }
            Request::AdvanceTo(t, reply) => {
                engine.run_until(t)?;
                publish(&engine, published);
                let _ = reply.send(engine.now());
            }
        }
        publish(&engine, published);
    }
    Ok(engine.into_outcome())
}

/// Read-only state rebuilt from recorded logs.
pub fn replay_state(metrics: Vec<MetricsRecord>, events: Vec<LogEvent>) -> ControlState {
    let status = replay_status(&metrics);
    let published = Published { status: Some(status), resources: Vec::new(), metrics, events };
    ControlState { published: Arc::new(RwLock::new(published)), requests: None }
}

fn replay_status(metrics: &[MetricsRecord]) -> StatusView {
    let mut runs: BTreeMap<&str, RunView> = BTreeMap::new();
    for m in metrics {
        let view = runs.entry(&m.run_id).or_insert_with(|| RunView {
            run_id: m.run_id.clone(),
            status: RunStatus::Running,
            clique: None,
            iteration: 0,
            quantum: 0,
            contract: ContractParams::default(),
            consecutive_violations: 0,
            average: None,
            paused: false,
        });
        view.quantum = m.quantum;
        if let Some(c) = &m.clique {
            view.clique = Some(c.clone());
        }
        if m.is_quantum() {
            view.iteration = m.iteration.unwrap_or(view.iteration);
            view.average = m.average;
            if let Some(t) = m.threshold {
                view.contract.degradation_threshold = t;
            }
            view.consecutive_violations = if m.violation { view.consecutive_violations + 1 } else { 0 };
            view.status = RunStatus::Running;
        }
        match m.event {
            Some(EventTag::Done) => view.status = RunStatus::Done,
            Some(EventTag::Hibernating) => view.status = RunStatus::Hibernating,
            Some(EventTag::Lost) => view.status = RunStatus::Lost,
            Some(EventTag::MigrationStarted) => view.status = RunStatus::Migrating,
            Some(EventTag::Restarted) | Some(EventTag::Announced) => view.status = RunStatus::Running,
            Some(EventTag::Paused) => view.paused = true,
            Some(EventTag::Resumed) => view.paused = false,
            _ => {}
        }
    }
    let time = metrics.last().map_or(0.0, |m| m.time);
    StatusView { time, finished: true, runs: runs.into_values().collect() }
}

pub fn router(state: ControlState) -> Router {
    Router::new()
        .route("/status", get(get_status))
        .route("/metrics", get(get_metrics))
        .route("/events", get(get_events))
        .route("/resources", get(get_resources))
        .route("/contract", post(post_contract))
        .route("/migrate", post(post_migrate))
        .route("/pause", post(post_pause))
        .route("/resume", post(post_resume))
        .route("/select", post(post_select))
        .with_state(state)
}

/// Serves the router until the process is stopped.
pub async fn serve(state: ControlState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Default, Deserialize)]
struct Since {
    #[serde(default)]
    since: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Page<T> {
    pub since: usize,
    pub next: usize,
    pub records: Vec<T>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Ack {
    pub accepted: bool,
    pub run_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

async fn get_status(State(s): State<ControlState>) -> Json<StatusView> {
    Json(s.snapshot(|p| {
        p.status.clone().unwrap_or(StatusView { time: 0.0, finished: false, runs: Vec::new() })
    }))
}

fn page<T: Clone>(items: &[T], since: usize) -> Page<T> {
    let since = since.min(items.len());
    Page { since, next: items.len(), records: items[since..].to_vec() }
}

async fn get_metrics(State(s): State<ControlState>, Query(q): Query<Since>) -> Json<Page<MetricsRecord>> {
    Json(s.snapshot(|p| page(&p.metrics, q.since)))
}

async fn get_events(State(s): State<ControlState>, Query(q): Query<Since>) -> Json<Page<LogEvent>> {
    Json(s.snapshot(|p| page(&p.events, q.since)))
}

async fn get_resources(State(s): State<ControlState>) -> Json<Vec<CliqueView>> {
    Json(s.snapshot(|p| p.resources.clone()))
}

fn parse_body<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> Result<T, Response> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, format!("invalid JSON body: {e}")))
}

async fn command(s: &ControlState, cmd: ControlCommand) -> Response {
    if s.is_read_only() {
        return error(StatusCode::CONFLICT, "read-only replay");
    }
    match s.submit(cmd).await {
        None => error(StatusCode::SERVICE_UNAVAILABLE, "engine stopped"),
        Some(Ok(run_id)) => (StatusCode::ACCEPTED, Json(Ack { accepted: true, run_id })).into_response(),
        Some(Err(e)) => {
            let status = match e {
                CommandError::NoRun | CommandError::UnknownRun(_) | CommandError::UnknownClique(_) => StatusCode::NOT_FOUND,
                CommandError::NotRunning { .. } | CommandError::Finished => StatusCode::CONFLICT,
                CommandError::TargetRejected { .. } | CommandError::NoTarget(_) | CommandError::InvalidParams(_) => {
                    StatusCode::UNPROCESSABLE_ENTITY
                }
            };
            error(status, e.to_string())
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct ContractBody {
    #[serde(default)]
    run_id: Option<String>,
    #[serde(flatten)]
    params: ParamsUpdate,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MigrateBody {
    #[serde(default)]
    run_id: Option<String>,
    #[serde(default)]
    target: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunBody {
    #[serde(default)]
    run_id: Option<String>,
}

async fn post_contract(State(s): State<ControlState>, body: Bytes) -> Response {
    match parse_body::<ContractBody>(&body) {
        Ok(b) => command(&s, ControlCommand::SetContractParams { run_id: b.run_id, params: b.params }).await,
        Err(r) => r,
    }
}

async fn post_migrate(State(s): State<ControlState>, body: Bytes) -> Response {
    match parse_body::<MigrateBody>(&body) {
        Ok(b) => command(&s, ControlCommand::MigrateNow { run_id: b.run_id, target: b.target }).await,
        Err(r) => r,
    }
}

async fn post_pause(State(s): State<ControlState>, body: Bytes) -> Response {
    match parse_body::<RunBody>(&body) {
        Ok(b) => command(&s, ControlCommand::Pause { run_id: b.run_id }).await,
        Err(r) => r,
    }
}

async fn post_resume(State(s): State<ControlState>, body: Bytes) -> Response {
    match parse_body::<RunBody>(&body) {
        Ok(b) => command(&s, ControlCommand::Resume { run_id: b.run_id }).await,
        Err(r) => r,
    }
}

async fn post_select(State(s): State<ControlState>, body: Bytes) -> Response {
    if s.is_read_only() {
        return error(StatusCode::CONFLICT, "read-only replay");
    }
    let text = match std::str::from_utf8(&body) {
        Ok(t) if t.trim().is_empty() => None,
        Ok(t) => Some(t.to_string()),
        Err(_) => return error(StatusCode::BAD_REQUEST, "request ad must be UTF-8"),
    };
    match s.select(text).await {
        Some(resp) => Json::<SelectionRecord>(resp.record()).into_response(),
        None => error(StatusCode::SERVICE_UNAVAILABLE, "engine stopped"),
    }
}
