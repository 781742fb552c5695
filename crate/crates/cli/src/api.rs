//! Stateless HTTP service over [`Engine`].
//!
//! | route              | body                                         |
//! |--------------------|----------------------------------------------|
//! | `GET /api/health`   | -                                            |
//! | `GET /api/backends` | -                                            |
//! | `POST /api/segment` | `{image, prompt, params?, gt?}`              |
//! | `POST /api/saliency`| `{image, prompt, params?}`                   |
//! | `POST /api/metrics` | `{prediction?, scores?, gt, id?}`            |
//!
//! Images and masks travel as base64 strings of encoded files. Errors are
//! `{"error": {"code", "message"}}`.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ndarray::Array2;
use promptseg_core::imaging::{decode_mask, Image};
use promptseg_core::metrics::{evaluate_mask, evaluate_scores, SegRecord};
use promptseg_core::pipeline::StageTimings;
use promptseg_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{unb64, Engine, SaliencyPayload, SaliencyResponse, SegmentInput, SegmentParams};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub image: String,
    pub prompt: String,
    #[serde(default)]
    pub params: SegmentParams,
    #[serde(default)]
    pub gt: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyRequest {
    pub image: String,
    pub prompt: String,
    #[serde(default)]
    pub params: SegmentParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRequest {
    /// Binary mask PNG, base64.
    #[serde(default)]
    pub prediction: Option<String>,
    /// Probability map in [0, 1], row-major; takes precedence over `prediction`.
    #[serde(default)]
    pub scores: Option<Vec<Vec<f64>>>,
    pub gt: String,
    #[serde(default)]
    pub id: Option<String>,
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
}

pub fn router(engine: Arc<Engine>, body_limit: usize) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/backends", get(backends))
        .route("/api/segment", post(segment))
        .route("/api/saliency", post(saliency))
        .route("/api/metrics", post(metrics))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(AppState { engine })
}

pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

pub fn error_body(code: &str, message: &str) -> serde_json::Value {
    json!({"error": {"code": code, "message": message}})
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::EmptySegmentation { .. } | Error::NoForeground => StatusCode::UNPROCESSABLE_ENTITY,
            Error::BackendUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            e if e.is_client_error() => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = error_body(e.code(), &e.to_string());
        // The saliency map is still useful for inspecting an empty result.
        if let Error::EmptySegmentation { saliency } = &e {
            body["error"]["saliency"] = serde_json::to_value(SaliencyPayload::new(saliency)).expect("payload serializes");
        }
        Self { status, body }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: error_body("BadRequest", &r.body_text()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.unwrap_or_else(|e| {
        Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: error_body("Internal", &e.to_string()),
        })
    })
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "backends": state.engine.backend_names()}))
}

async fn backends(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::to_value(state.engine.backends()).expect("backends serialize"))
}

fn server_timing(timings: &StageTimings) -> HeaderValue {
    let value = format!(
        "saliency;dur={:.3}, crf;dur={:.3}, boxes;dur={:.3}, segment;dur={:.3}",
        timings.saliency_ms, timings.crf_ms, timings.boxes_ms, timings.segment_ms
    );
    HeaderValue::from_str(&value).expect("ascii header")
}

async fn segment(State(state): State<AppState>, body: Result<Json<SegmentRequest>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body?;
    if req.prompt.trim().is_empty() {
        return Err(Error::EmptyPrompt.into());
    }
    let engine = state.engine.clone();
    let (resp, timings) = blocking(move || {
        let image = unb64(&req.image)?;
        let gt = req.gt.as_deref().map(unb64).transpose()?;
        let input = SegmentInput::decode(&image, &req.prompt, req.params, gt.as_deref())?;
        let outcome = engine.segment(&input)?;
        Ok((outcome.response(), outcome.pseudo.timings))
    })
    .await?;
    let header = server_timing(&timings);
    let mut response = Json(resp).into_response();
    response.headers_mut().insert("server-timing", header);
    Ok(response)
}

async fn saliency(State(state): State<AppState>, body: Result<Json<SaliencyRequest>, JsonRejection>) -> Result<Json<SaliencyResponse>, ApiError> {
    let Json(req) = body?;
    if req.prompt.trim().is_empty() {
        return Err(Error::EmptyPrompt.into());
    }
    let engine = state.engine.clone();
    blocking(move || {
        let image = Image::decode(&unb64(&req.image)?)?;
        let map = engine.saliency(&image, &req.prompt, &req.params)?;
        Ok(Json(SaliencyResponse {
            prompt: req.prompt,
            saliency: SaliencyPayload::new(&map),
            warnings: map.warnings,
        }))
    })
    .await
}

async fn metrics(body: Result<Json<MetricsRequest>, JsonRejection>) -> Result<Json<SegRecord>, ApiError> {
    let Json(req) = body?;
    blocking(move || {
        let gt = decode_mask(&unb64(&req.gt)?)?;
        let id = req.id.as_deref().unwrap_or("prediction");
        let record = match (&req.scores, &req.prediction) {
            (Some(rows), _) => {
                let h = rows.len();
                let w = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != w) {
                    return Err(Error::ShapeMismatch("scores rows have different lengths".into()).into());
                }
                let scores = Array2::from_shape_vec((h, w), rows.concat()).expect("rectangular");
                evaluate_scores(id, scores.view(), &gt)?
            }
            (None, Some(pred)) => evaluate_mask(id, &decode_mask(&unb64(pred)?)?, &gt)?,
            (None, None) => {
                return Err(Error::InvalidConfig("one of `prediction` or `scores` is required".into()).into());
            }
        };
        Ok(Json(record))
    })
    .await
}

/// Binds and serves until ctrl-c.
pub async fn serve(engine: Arc<Engine>, bind: &str, body_limit: usize) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(engine, body_limit))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
