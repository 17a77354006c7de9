//! HTTP API for the human-labeling client, backed by a shared session.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use reward_repair::environments::Environment;
use reward_repair::harness::{correction_heatmap, policy_view, SessionStatus, SessionStore};
use reward_repair::mdp::Trajectory;
use reward_repair::preferences::PendingPair;
use reward_repair::RepairError;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/api/session", get(session))
        .route("/api/pair/next", get(next_pair))
        .route("/api/pair/{id}/label", post(label_pair))
        .route("/api/reward/heatmap", get(heatmap))
        .route("/api/policy", get(policy))
        .route("/api/curve", get(curve))
        .with_state(store)
}

#[derive(Debug, Serialize)]
struct ApiError {
    error: &'static str,
    reason: String,
}

fn error(status: StatusCode, code: &'static str, reason: impl Into<String>) -> Response {
    (status, Json(ApiError { error: code, reason: reason.into() })).into_response()
}

fn repair_error(e: RepairError) -> Response {
    match e {
        RepairError::UnknownPair(_) => error(StatusCode::NOT_FOUND, "unknown_pair", e.to_string()),
        RepairError::AlreadyLabeled(_) => error(StatusCode::CONFLICT, "already_labeled", e.to_string()),
        RepairError::InvalidLabel(_) => error(StatusCode::BAD_REQUEST, "invalid_label", e.to_string()),
        RepairError::InvalidInput(_) => error(StatusCode::BAD_REQUEST, "invalid_input", e.to_string()),
        _ => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

#[derive(Debug, Serialize)]
struct GridLayout {
    width: usize,
    height: usize,
    walls: Vec<(usize, usize)>,
    tomatoes: Vec<(usize, usize)>,
    sprinkler: (usize, usize),
    start: (usize, usize),
}

#[derive(Debug, Serialize)]
struct SessionView {
    env: String,
    status: SessionStatus,
    message: Option<String>,
    iteration: usize,
    pending: usize,
    /// Labels the run has consumed, in order.
    labels: Vec<f64>,
    grid: Option<GridLayout>,
}

async fn session(State(store): State<Arc<SessionStore>>) -> Json<SessionView> {
    let env = &store.env;
    let grid = env.grid.as_ref().map(|g| GridLayout {
        width: g.spec.width,
        height: g.spec.height,
        walls: g.spec.walls.clone(),
        tomatoes: g.spec.tomatoes.clone(),
        sprinkler: g.spec.sprinkler,
        start: g.spec.start,
    });
    let s = store.lock();
    Json(SessionView {
        env: env.id.clone(),
        status: s.status,
        message: s.message.clone(),
        iteration: s.iteration,
        pending: s.queue.pending_len(),
        labels: s.labeled.iter().map(|(_, p)| p.label.mu()).collect(),
        grid,
    })
}

#[derive(Debug, Serialize)]
struct TrajectoryView {
    states: Vec<usize>,
    actions: Vec<usize>,
    /// Grid cell of every state, or `(state, 0)` off the grid.
    cells: Vec<(usize, usize)>,
}

fn trajectory_view(env: &Environment, t: &Trajectory) -> TrajectoryView {
    let cells = t
        .states
        .iter()
        .map(|&s| match &env.grid {
            Some(g) => g.cell_of_state(s),
            None => (s, 0),
        })
        .collect();
    TrajectoryView { states: t.states.clone(), actions: t.actions.clone(), cells }
}

#[derive(Debug, Serialize)]
struct PairView {
    id: u64,
    tau1: TrajectoryView,
    tau2: TrajectoryView,
}

fn pair_view(env: &Environment, p: &PendingPair) -> PairView {
    PairView { id: p.id, tau1: trajectory_view(env, &p.tau1), tau2: trajectory_view(env, &p.tau2) }
}

async fn next_pair(State(store): State<Arc<SessionStore>>) -> Json<serde_json::Value> {
    match store.next_pair() {
        Some(p) => Json(json!({ "status": "pending", "pair": pair_view(&store.env, &p) })),
        None => Json(json!({ "status": "empty" })),
    }
}

#[derive(Debug, Deserialize)]
struct LabelBody {
    mu: f64,
}

async fn label_pair(State(store): State<Arc<SessionStore>>, Path(id): Path<String>, body: Bytes) -> Response {
    let Ok(id) = id.parse::<u64>() else {
        return error(StatusCode::BAD_REQUEST, "malformed_id", format!("pair id {id:?} is not an integer"));
    };
    let body: LabelBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, "malformed_body", e.to_string()),
    };
    match store.submit(id, body.mu) {
        Ok(()) => Json(json!({ "status": "accepted", "id": id, "mu": body.mu })).into_response(),
        Err(e) => repair_error(e),
    }
}

async fn heatmap(State(store): State<Arc<SessionStore>>) -> Response {
    let correction = store.lock().correction.clone();
    match correction_heatmap(&store.env, &correction) {
        Ok(h) => Json(h).into_response(),
        Err(e) => repair_error(e),
    }
}

async fn policy(State(store): State<Arc<SessionStore>>) -> Response {
    let p = store.lock().policy.clone();
    match policy_view(&store.env, &p) {
        Ok(v) => Json(v).into_response(),
        Err(e) => repair_error(e),
    }
}

async fn curve(State(store): State<Arc<SessionStore>>) -> Json<serde_json::Value> {
    let rows = store.lock().curve.clone();
    Json(json!({ "rows": rows }))
}
