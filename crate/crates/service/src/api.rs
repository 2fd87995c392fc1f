//! HTTP and WebSocket interface, mounted under `/api/v1`.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clicksim_core::analysis::{analyze, AnalysisReport};
use clicksim_core::protocol::ProtocolError;
use clicksim_core::session::{SessionMode, SESSION_SCHEMA_VERSION};
use clicksim_core::subject::default_population;
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts;
use crate::store::{CreateSession, Store, StoreError, SubmitRequest};
use crate::telemetry::{render_frames, StimulusSpec, TelemetryRequest};

pub const API_PREFIX: &str = "/api/v1";
const FIRST_MESSAGE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
}

pub fn router(store: Arc<Store>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/roster", get(roster))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next_prompt))
        .route("/sessions/{id}/responses", post(submit))
        .route("/sessions/{id}/abort", post(abort))
        .route("/sessions/{id}/resume", post(resume))
        .route("/sessions/{id}/trials.csv", get(trials_csv))
        .route("/analysis", get(analysis))
        .route("/analysis/{artifact}", get(analysis_artifact))
        .route("/telemetry", get(telemetry));
    Router::new().nest(API_PREFIX, api).with_state(AppState { store })
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    phase: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expected_index: Option<usize>,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: error.into(),
                phase: None,
                expected_index: None,
            },
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Exists(_) | StoreError::Aborted(_) | StoreError::SimulatedSession => StatusCode::CONFLICT,
            StoreError::BadRequest(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Protocol { source, .. } => match source {
                ProtocolError::WrongKind { .. } | ProtocolError::InvalidRating(_) => StatusCode::UNPROCESSABLE_ENTITY,
                ProtocolError::Conflict { .. } | ProtocolError::OutOfOrder { .. } | ProtocolError::Complete => {
                    StatusCode::CONFLICT
                }
                ProtocolError::Plan(_) => StatusCode::INTERNAL_SERVER_ERROR,
            },
            StoreError::File { .. } | StoreError::Session(_) | StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(error = %e, "request failed");
        }
        let mut err = ApiError::new(status, e.to_string());
        if let StoreError::Protocol { phase, source, .. } = e {
            err.body.phase = Some(phase);
            if let ProtocolError::OutOfOrder { expected, .. } = source {
                err.body.expected_index = Some(expected);
            }
        }
        err
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "schema_version": SESSION_SCHEMA_VERSION}))
}

async fn roster() -> Json<serde_json::Value> {
    Json(json!(default_population()))
}

async fn list_sessions(State(app): State<AppState>) -> impl IntoResponse {
    Json(app.store.summaries().await)
}

async fn create_session(State(app): State<AppState>, body: Json<CreateSession>) -> ApiResult<Response> {
    let store = app.store.clone();
    let record = tokio::task::spawn_blocking(move || store.create(body.0))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(app.store.get(&id).await?).into_response())
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    /// Drop stimulus parameters from the prompt (subject-facing views).
    #[serde(default)]
    blind: bool,
}

async fn next_prompt(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<NextQuery>,
) -> ApiResult<Response> {
    let reply = app.store.next(&id).await?;
    let mut v = serde_json::to_value(&reply).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    if q.blind {
        if let Some(p) = v.get_mut("prompt").and_then(|p| p.as_object_mut()) {
            p.remove("params");
            p.remove("direction");
        }
    }
    Ok(Json(v).into_response())
}

async fn submit(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Json<SubmitRequest>,
) -> ApiResult<Response> {
    Ok(Json(app.store.submit(&id, body.0).await?).into_response())
}

async fn abort(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(app.store.abort(&id).await?).into_response())
}

async fn resume(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(app.store.resume(&id).await?).into_response())
}

async fn trials_csv(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let record = app.store.get(&id).await?;
    let mut buf = Vec::new();
    record.write_trials_csv(&mut buf).map_err(StoreError::from)?;
    Ok(([(header::CONTENT_TYPE, artifacts::content_type("x.csv"))], buf).into_response())
}

#[derive(Debug, Deserialize)]
struct AnalysisQuery {
    /// Comma-separated session ids; every complete session when absent.
    #[serde(default)]
    sessions: Option<String>,
}

async fn report(app: &AppState, q: &AnalysisQuery) -> ApiResult<AnalysisReport> {
    let ids: Vec<String> = q
        .sessions
        .as_deref()
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect();
    let snapshot = app.store.snapshot(&ids).await?;
    tokio::task::spawn_blocking(move || analyze(&snapshot))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

async fn analysis(State(app): State<AppState>, Query(q): Query<AnalysisQuery>) -> ApiResult<Response> {
    Ok(Json(report(&app, &q).await?).into_response())
}

async fn analysis_artifact(
    State(app): State<AppState>,
    Path(name): Path<String>,
    Query(q): Query<AnalysisQuery>,
) -> ApiResult<Response> {
    if !artifacts::TABLES.contains(&name.as_str()) && !artifacts::FIGURES.contains(&name.as_str()) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no artifact {name:?}")));
    }
    let report = report(&app, &q).await?;
    let bytes = artifacts::render(&report, &name)
        .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("cannot render {name}")))?;
    Ok(([(header::CONTENT_TYPE, artifacts::content_type(&name))], Body::from(bytes)).into_response())
}

async fn telemetry(State(app): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_telemetry(socket, app))
}

async fn stimulus_for(app: &AppState, req: &TelemetryRequest) -> Result<StimulusSpec, String> {
    if let Some(id) = &req.session_id {
        let record = app.store.get(id).await.map_err(|e| e.to_string())?;
        if record.mode != SessionMode::Live {
            return Err(format!("session {id:?} is not live"));
        }
        let next = app.store.next(id).await.map_err(|e| e.to_string())?;
        let p = next.prompt.ok_or_else(|| format!("session {id:?} has no pending trial"))?.params;
        return Ok(StimulusSpec {
            duty_pct: p.duty_cycle_pct(),
            duration_ms: p.duration_ms(),
            amplitude_pp_mn: p.amplitude_pp_mn(),
        });
    }
    Ok(req.stimulus.unwrap_or_default())
}

async fn stream_telemetry(socket: WebSocket, app: AppState) {
    let (mut tx, mut rx) = socket.split();
    let req = match tokio::time::timeout(FIRST_MESSAGE_TIMEOUT, rx.next()).await {
        Ok(Some(Ok(Message::Text(text)))) => serde_json::from_str::<TelemetryRequest>(&text).map_err(|e| e.to_string()),
        Ok(Some(Ok(_))) => Err("expected a JSON text message".to_owned()),
        Ok(_) => return,
        Err(_) => Err("no request received".to_owned()),
    };
    let frames = match req {
        Ok(req) => match stimulus_for(&app, &req).await {
            Ok(spec) => {
                let profile = req.profile.clone().unwrap_or_default();
                let rendered = tokio::task::spawn_blocking(move || {
                    render_frames(&profile, spec.params()?, req.frame_hz, req.device_seed)
                })
                .await;
                match rendered {
                    Ok(Ok(frames)) => Ok((frames, req)),
                    Ok(Err(e)) => Err(e.to_string()),
                    Err(e) => Err(e.to_string()),
                }
            }
            Err(e) => Err(e),
        },
        Err(e) => Err(e),
    };
    let (frames, req) = match frames {
        Ok(v) => v,
        Err(error) => {
            let _ = tx.send(Message::Text(json!({ "error": error }).to_string().into())).await;
            let _ = tx.send(Message::Close(None)).await;
            return;
        }
    };
    let (stop_tx, mut stop_rx) = tokio::sync::oneshot::channel::<()>();
    let reader = tokio::spawn(async move {
        while let Some(Ok(msg)) = rx.next().await {
            let stop = match &msg {
                Message::Close(_) => true,
                Message::Text(t) => serde_json::from_str::<serde_json::Value>(t)
                    .ok()
                    .is_some_and(|v| v.get("type").and_then(|t| t.as_str()) == Some("stop")),
                _ => false,
            };
            if stop {
                break;
            }
        }
        let _ = stop_tx.send(());
    });
    let mut ticker = tokio::time::interval(Duration::from_secs_f64(1.0 / req.frame_hz));
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    for frame in &frames {
        if stop_rx.try_recv().is_ok() {
            break;
        }
        if req.realtime && !frame.is_trigger() {
            ticker.tick().await;
        }
        let text = serde_json::to_string(frame).expect("frames serialize");
        if tx.send(Message::Text(text.into())).await.is_err() {
            break;
        }
    }
    let _ = tx.send(Message::Close(None)).await;
    reader.abort();
}
