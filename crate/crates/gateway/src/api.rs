//! North-bound HTTP/JSON API.
//!
//! | method | path                       | purpose                               |
//! |--------|----------------------------|---------------------------------------|
//! | GET    | /status                    | devices, trial phases, event counts   |
//! | POST   | /devices/{id}/command      | guarded activate / stop / set_tension |
//! | POST   | /cameras/{id}/motion       | motion event (wire-protocol body)     |
//! | GET    | /events?since=N            | server-sent events, one line each     |
//! | GET    | /trials                    | trials with current phase and summary |
//! | POST   | /trials                    | schedule a trial                      |
//! | GET    | /characterization          | sweep CSV                             |

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tadbot_core::actuation::ActuationConfig;
use tadbot_core::experiment::{summarize, CareSummary, Trial, TrialRequest};
use tadbot_core::protocol::{decode, Ack, WireMessage};
use tadbot_core::signal::{frequency_grid, sweep_characterization, write_sweep_csv};

use crate::error::ApiError;
use crate::{trial_status, AppState, CommandRequest, CurrentPhase, MotionReceipt, StatusSnapshot};

pub const EPOCH_HEADER: &str = "x-gateway-epoch";

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/devices/{id}/command", post(command))
        .route("/cameras/{id}/motion", post(motion))
        .route("/events", get(events))
        .route("/trials", get(list_trials).post(create_trial))
        .route("/characterization", get(characterization))
        .with_state(state)
}

async fn status(State(state): State<Arc<AppState>>) -> Json<StatusSnapshot> {
    Json(state.status())
}

async fn command(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<AckBody>, ApiError> {
    let req: CommandRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("command body: {e}")))?;
    let ack = state.command_device(&id, &req).await?;
    Ok(Json(ack.into()))
}

/// JSON shape of an ack returned to API callers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AckBody {
    pub id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl From<Ack> for AckBody {
    fn from(a: Ack) -> Self {
        Self { id: a.id, ok: a.ok, error: a.error }
    }
}

async fn motion(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<MotionReceipt>, ApiError> {
    let msg = decode(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let WireMessage::Motion(m) = msg else {
        return Err(ApiError::BadRequest(format!("expected a motion message, got {}", msg.type_name())));
    };
    Ok(Json(state.ingest_motion(&id, m)?))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    since: Option<u64>,
}

async fn events(
    State(state): State<Arc<AppState>>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> impl IntoResponse {
    let since = q.since.unwrap_or_else(|| {
        headers
            .get("last-event-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    });
    let epoch = state.store.epoch().to_owned();
    let watch = state.store.watch();
    let shutdown = state.shutdown_signal();

    let stream = futures::stream::unfold(
        (state, watch, shutdown, since, VecDeque::new()),
        |(state, mut watch, mut shutdown, mut last, mut pending)| async move {
            loop {
                if let Some(r) = pending.pop_front() {
                    let r: crate::EventRecord = r;
                    last = r.seq;
                    let ev = Event::default().id(r.seq.to_string()).event(r.kind()).data(r.line());
                    return Some((Ok::<_, Infallible>(ev), (state, watch, shutdown, last, pending)));
                }
                if *shutdown.borrow() {
                    return None;
                }
                let batch = state.store.since(last);
                if !batch.is_empty() {
                    pending.extend(batch);
                    continue;
                }
                tokio::select! {
                    changed = watch.changed() => if changed.is_err() { return None },
                    _ = shutdown.changed() => return None,
                }
            }
        },
    );
    ([(EPOCH_HEADER, epoch)], Sse::new(stream).keep_alive(KeepAlive::default()))
}

/// Entry of `GET /trials`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialView {
    pub trial: Trial,
    pub current_phase: Option<CurrentPhase>,
    pub summary: CareSummary,
}

async fn list_trials(State(state): State<Arc<AppState>>) -> Json<Vec<TrialView>> {
    let now = state.clock.now();
    let trials = state.trials.lock().unwrap();
    Json(
        trials
            .trials()
            .iter()
            .map(|t| TrialView {
                trial: t.clone(),
                current_phase: trial_status(t, now).current_phase,
                summary: summarize(trials.events(&t.trial_id), t),
            })
            .collect(),
    )
}

async fn create_trial(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<Trial>), ApiError> {
    let req: TrialRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("trial body: {e}")))?;
    let trial = state.trials.lock().unwrap().create(&req)?;
    Ok((StatusCode::CREATED, Json(trial)))
}

#[derive(Debug, Deserialize)]
struct SweepQuery {
    fmin: f64,
    fmax: f64,
    step: f64,
    #[serde(default)]
    noise: f64,
    #[serde(default)]
    seed: u64,
    duration: Option<f64>,
}

async fn characterization(
    query: Result<Query<SweepQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    if !q.step.is_finite() || q.step <= 0.0 || q.fmin > q.fmax || q.fmin < 0.0 {
        return Err(ApiError::BadRequest("need 0 <= fmin <= fmax and step > 0".into()));
    }
    let freqs = frequency_grid(q.fmin, q.fmax, q.step);
    if freqs.len() > 10_000 {
        return Err(ApiError::BadRequest("too many frequencies".into()));
    }
    let duration = q.duration.unwrap_or(2.0);
    let csv = tokio::task::spawn_blocking(move || {
        let points = sweep_characterization(&ActuationConfig::default(), &freqs, duration, q.noise, q.seed)
            .map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let mut out = Vec::new();
        write_sweep_csv(&points, &mut out).map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok::<_, ApiError>(out)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv))
}
