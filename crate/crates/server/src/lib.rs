//! HTTP intake for pull-request events.
//!
//! `POST /events/pull-request` validates the payload, answers `202` with the
//! event id and queues the event. A single worker thread drains the queue in
//! arrival order, so ingest stays single-writer. `GET /health` and
//! `GET /status` report queue depth and per-event outcomes.
//!
//! There is no authentication; run it behind a trusted proxy.

use std::collections::HashSet;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Json, Response};
use axum::routing::{get, post};
use axum::Router;
use serde_json::json;

use certiflow_core::gateway::config::ProjectConfig;
use certiflow_core::gateway::event::PullRequestEvent;
use certiflow_core::gateway::pipeline::{handle_pull_request, IngestOptions};
use certiflow_core::workspace::{Project, Workspace};

/// Consumes events one at a time, in arrival order.
pub trait EventProcessor: Send + 'static {
    /// A one-line summary on success.
    fn process(&mut self, event_id: &str, event: &PullRequestEvent) -> Result<String, String>;

    /// Event ids already handled by an earlier run.
    fn known_events(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Runs the ingest pipeline against the workspace described by a config,
/// holding the workspace lock for each event.
pub struct WorkspaceProcessor {
    config: ProjectConfig,
}

impl WorkspaceProcessor {
    pub fn new(config: ProjectConfig) -> Self {
        WorkspaceProcessor { config }
    }
}

impl EventProcessor for WorkspaceProcessor {
    fn process(&mut self, _event_id: &str, event: &PullRequestEvent) -> Result<String, String> {
        let mut ws = Workspace::open(self.config.clone()).map_err(|e| e.to_string())?;
        let _lock = ws.lock().map_err(|e| e.to_string())?;
        // reload under the lock so a concurrent CLI write is not lost
        ws.project = Project::load(&self.config.state_dir).map_err(|e| e.to_string())?;
        let r = handle_pull_request(&mut ws, event, &IngestOptions::default())
            .map_err(|e| e.to_string())?;
        if r.duplicate {
            return Ok("duplicate".into());
        }
        ws.save().map_err(|e| e.to_string())?;
        Ok(format!(
            "{} requirements touched, {} artifacts registered, {} anomalies",
            r.imported.len(),
            r.registered.len(),
            r.anomalies.len()
        ))
    }

    fn known_events(&self) -> Vec<String> {
        Project::load(&self.config.state_dir)
            .map(|p| p.ingest_log.into_iter().map(|e| e.event_id).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Processed {
    pub event_id: String,
    pub repo: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Default)]
struct Status {
    accepted: HashSet<String>,
    queue_depth: usize,
    last_event_id: Option<String>,
    processed: Vec<Processed>,
}

#[derive(Clone)]
pub struct Service {
    tx: mpsc::Sender<(String, PullRequestEvent)>,
    status: Arc<Mutex<Status>>,
}

impl Service {
    /// Starts the worker thread.
    pub fn start<P: EventProcessor>(mut processor: P) -> Self {
        let status = Arc::new(Mutex::new(Status {
            accepted: processor.known_events().into_iter().collect(),
            ..Default::default()
        }));
        let (tx, rx) = mpsc::channel::<(String, PullRequestEvent)>();
        let worker_status = Arc::clone(&status);
        thread::spawn(move || {
            for (event_id, event) in rx {
                let outcome = processor.process(&event_id, &event);
                let mut s = lock(&worker_status);
                s.queue_depth -= 1;
                s.last_event_id = Some(event_id.clone());
                let (ok, detail) = match outcome {
                    Ok(d) => (true, d),
                    Err(e) => (false, e),
                };
                s.processed.push(Processed {
                    event_id,
                    repo: event.repo,
                    ok,
                    detail,
                });
            }
        });
        Service { tx, status }
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/events/pull-request", post(accept))
            .route("/health", get(health))
            .route("/status", get(status))
            .with_state(self.clone())
    }

    pub fn queue_depth(&self) -> usize {
        lock(&self.status).queue_depth
    }

    pub fn processed(&self) -> Vec<Processed> {
        lock(&self.status).processed.clone()
    }

    /// Waits until the queue is empty; false on timeout.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let end = Instant::now() + timeout;
        while Instant::now() < end {
            if self.queue_depth() == 0 {
                return true;
            }
            thread::sleep(Duration::from_millis(5));
        }
        self.queue_depth() == 0
    }
}

fn lock(m: &Mutex<Status>) -> MutexGuard<'_, Status> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

async fn accept(State(svc): State<Service>, body: Bytes) -> Response {
    let event = match PullRequestEvent::from_json(&body) {
        Ok(e) => e,
        Err(e) => {
            return (
                StatusCode::BAD_REQUEST,
                Json(json!({ "error": e.reason, "field": e.field })),
            )
                .into_response();
        }
    };
    let event_id = event.event_id();
    let mut s = lock(&svc.status);
    if !s.accepted.insert(event_id.clone()) {
        return (
            StatusCode::ACCEPTED,
            Json(json!({ "event_id": event_id, "duplicate": true })),
        )
            .into_response();
    }
    s.queue_depth += 1;
    // sent under the status lock so queue order equals acceptance order
    if svc.tx.send((event_id.clone(), event)).is_err() {
        s.queue_depth -= 1;
        s.accepted.remove(&event_id);
        return (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "error": "worker stopped" })),
        )
            .into_response();
    }
    (
        StatusCode::ACCEPTED,
        Json(json!({ "event_id": event_id, "duplicate": false })),
    )
        .into_response()
}

async fn health(State(svc): State<Service>) -> Json<serde_json::Value> {
    let s = lock(&svc.status);
    Json(json!({ "status": "ok", "queue_depth": s.queue_depth, "last_event_id": s.last_event_id }))
}

async fn status(State(svc): State<Service>) -> Json<serde_json::Value> {
    let s = lock(&svc.status);
    let processed: Vec<_> = s
        .processed
        .iter()
        .map(|p| json!({ "event_id": p.event_id, "repo": p.repo, "ok": p.ok, "detail": p.detail }))
        .collect();
    Json(json!({ "queue_depth": s.queue_depth, "processed": processed }))
}

/// Serves until the process is stopped.
pub async fn serve<P: EventProcessor>(
    listener: tokio::net::TcpListener,
    processor: P,
) -> std::io::Result<()> {
    let svc = Service::start(processor);
    axum::serve(listener, svc.router()).await
}
