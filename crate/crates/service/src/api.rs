//! JSON HTTP API over [`Engine`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use proguide_core::{Arity, Session};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{Engine, EngineError, MetricsReport};

pub const SUMMARY_HEADER: &str = "x-export-summary";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::UnknownSession(_) | EngineError::UnknownTurn { .. } => StatusCode::NOT_FOUND,
            EngineError::DuplicateClick { .. } => StatusCode::CONFLICT,
            EngineError::EmptyQuery | EngineError::GuidanceIndex { .. } => StatusCode::BAD_REQUEST,
            EngineError::Answer(_) | EngineError::ClickScore(_) => StatusCode::BAD_GATEWAY,
            EngineError::InsufficientGuidance { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreatedSession {
    pub id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRequest {
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub turn_index: usize,
    pub answer: String,
    pub guidance: Vec<String>,
    pub shift_detected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClickRequest {
    pub guidance_index: usize,
}

#[derive(Debug, Deserialize)]
pub struct ExportParams {
    pub format: Option<String>,
}

async fn blocking<T, F>(engine: &Arc<Engine>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, EngineError> + Send + 'static,
{
    let engine = Arc::clone(engine);
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })?
        .map_err(ApiError::from)
}

async fn create_session(State(engine): State<Arc<Engine>>) -> Result<(StatusCode, Json<CreatedSession>), ApiError> {
    let id = blocking(&engine, |e| e.create_session()).await?;
    Ok((StatusCode::CREATED, Json(CreatedSession { id })))
}

async fn post_turn(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    Json(body): Json<TurnRequest>,
) -> Result<Json<TurnResponse>, ApiError> {
    let out = blocking(&engine, move |e| e.handle_turn(&id, &body.query)).await?;
    Ok(Json(TurnResponse {
        turn_index: out.turn_index,
        answer: out.answer,
        guidance: out.guidance.into_iter().map(|g| g.text).collect(),
        shift_detected: out.context.shift_detected,
    }))
}

async fn post_click(
    State(engine): State<Arc<Engine>>,
    Path((id, turn)): Path<(String, usize)>,
    Json(body): Json<ClickRequest>,
) -> Result<Json<serde_json::Value>, ApiError> {
    blocking(&engine, move |e| e.record_click(&id, turn, body.guidance_index)).await?;
    Ok(Json(json!({})))
}

async fn get_session(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    Ok(Json(blocking(&engine, move |e| e.get_session(&id)).await?))
}

async fn export(State(engine): State<Arc<Engine>>, Query(params): Query<ExportParams>) -> Result<Response, ApiError> {
    let format: Arity = match params.format.as_deref() {
        None => Arity::OnePair,
        Some(f) => f.parse().map_err(|_| ApiError::bad_request(format!("unknown export format `{f}`")))?,
    };
    let export = blocking(&engine, move |e| e.export_preferences(format)).await?;
    let summary = serde_json::to_string(&export.summary).unwrap_or_default();
    let mut resp = export.to_jsonl().into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/x-ndjson"));
    if let Ok(v) = HeaderValue::from_str(&summary) {
        headers.insert(SUMMARY_HEADER, v);
    }
    Ok(resp)
}

async fn metrics(State(engine): State<Arc<Engine>>) -> Result<Json<MetricsReport>, ApiError> {
    Ok(Json(blocking(&engine, |e| Ok(e.metrics())).await?))
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/turns", post(post_turn))
        .route("/v1/sessions/{id}/turns/{turn}/click", post(post_click))
        .route("/v1/export/preferences", get(export))
        .route("/v1/metrics", get(metrics))
        .with_state(engine)
}

/// Serves until Ctrl-C.
pub async fn serve(engine: Arc<Engine>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
