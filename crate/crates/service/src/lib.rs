//! HTTP+JSON service for running a dose-finding trial one patient at a time.
//!
//! Doses are exchanged on the trial's own axis (`x_min..x_max`); the engine
//! works on the unit axis internally. Every session is reconstructed from an
//! append-only event log, so a restarted server resumes where it stopped.

pub mod engine;
pub mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use dosefind::{PolicySpec, TrialConfig};
use serde::{Deserialize, Serialize};

pub use engine::{DensitySample, Engine, PosteriorView, Recommendation};
pub use error::ApiError;
pub use store::{Event, OutcomeRecord, Session, Store};

/// Policy given by name or as a full specification.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PolicyField {
    Name(String),
    Spec(PolicySpec),
}

impl Default for PolicyField {
    fn default() -> Self {
        PolicyField::Name("ewoc".into())
    }
}

impl PolicyField {
    pub fn into_spec(self) -> PolicySpec {
        match self {
            PolicyField::Name(n) => PolicySpec::named(&n),
            PolicyField::Spec(s) => s,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub x_min: f64,
    pub x_max: f64,
    pub q: f64,
    pub p: f64,
    pub omega: f64,
    pub n: usize,
    #[serde(default)]
    pub policy: PolicyField,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
}

/// A binary response given as `0`/`1` or `false`/`true`.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged)]
pub enum Response01 {
    Bool(bool),
    Int(u8),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeRequest {
    pub dose: f64,
    pub y: Response01,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub x_min: f64,
    pub x_max: f64,
    pub q: f64,
    pub p: f64,
    pub omega: f64,
    pub n: usize,
    pub policy: PolicySpec,
    pub outcomes: Vec<OutcomeRecord>,
    pub patients: usize,
    pub complete: bool,
}

impl From<&Session> for SessionView {
    fn from(s: &Session) -> Self {
        let c = s.config;
        SessionView {
            id: s.id.clone(),
            x_min: c.x_min,
            x_max: c.x_max,
            q: c.q,
            p: c.p,
            omega: c.omega,
            n: c.n,
            policy: s.policy.clone(),
            outcomes: s.outcomes.clone(),
            patients: s.outcomes.len(),
            complete: s.outcomes.len() >= c.n,
        }
    }
}

pub type AppState = Arc<Store>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Log(format!("worker failed: {e}")))?
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create(State(store): State<AppState>, Json(req): Json<CreateSession>) -> Result<(StatusCode, Json<Created>), ApiError> {
    let config = TrialConfig { x_min: req.x_min, x_max: req.x_max, q: req.q, p: req.p, omega: req.omega, n: req.n };
    let policy = req.policy.into_spec();
    Engine::new(config, &policy)?;
    let id = store.create(config, policy)?;
    Ok((StatusCode::CREATED, Json(Created { id })))
}

async fn session(State(store): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let handle = store.get(&id)?;
    let s = handle.lock().await;
    Ok(Json(SessionView::from(&*s)))
}

async fn recommendation(State(store): State<AppState>, Path(id): Path<String>) -> Result<Json<Recommendation>, ApiError> {
    let s = store.get(&id)?.lock().await.clone();
    let rec = blocking(move || s.engine()?.recommend(&s.observations())).await?;
    Ok(Json(rec))
}

async fn posterior(State(store): State<AppState>, Path(id): Path<String>) -> Result<Json<PosteriorView>, ApiError> {
    let s = store.get(&id)?.lock().await.clone();
    let view = blocking(move || s.engine()?.posterior_view(&s.observations())).await?;
    Ok(Json(view))
}

async fn outcome(
    State(store): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<OutcomeRequest>,
) -> Result<Json<Recommendation>, ApiError> {
    let y = match req.y {
        Response01::Bool(b) => u8::from(b),
        Response01::Int(v @ (0 | 1)) => v,
        Response01::Int(v) => return Err(ApiError::invalid(format!("y must be 0 or 1, got {v}"))),
    };
    let handle = store.get(&id)?;
    let mut s = handle.lock().await;
    let engine = s.engine()?;
    engine.check_dose(req.dose)?;
    if s.outcomes.len() >= s.config.n {
        return Err(ApiError::Conflict(format!("trial {id} already has all {} patients", s.config.n)));
    }
    let (e, obs) = (engine.clone(), s.observations());
    let recommended = blocking(move || e.pending_dose(&obs)).await?;
    if recommended.is_none() {
        return Err(ApiError::Conflict(format!("trial {id} was stopped by its escalation rule")));
    }
    store.record(&mut s, req.dose, y, recommended)?;
    let obs = s.observations();
    drop(s);
    Ok(Json(blocking(move || engine.recommend(&obs)).await?))
}

pub fn router(store: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(session))
        .route("/sessions/{id}/outcomes", post(outcome))
        .route("/sessions/{id}/recommendation", get(recommendation))
        .route("/sessions/{id}/posterior", get(posterior))
        .with_state(store)
}

/// Serves until the process is stopped. With `log`, sessions persist there.
pub async fn serve(addr: SocketAddr, log: Option<PathBuf>) -> Result<(), ApiError> {
    let store = match log {
        Some(p) => Store::open(&p)?,
        None => Store::in_memory(),
    };
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(Arc::new(store))).await?;
    Ok(())
}
