//! HTTP inference API over one immutable, shared network.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use ahnet_core::data::image::{decode_png, encode_mask_png};
use ahnet_core::data::Gray8;
use ahnet_core::segnet::{Network, NetworkHooks, NetworkSpec};
use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::config::ServeConfig;
use crate::inference::{rle_encode, segment, ProbabilitySummary};

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

pub struct AppState {
    net: Network,
    model_id: String,
    max_side: usize,
    runs: AtomicU64,
}

impl AppState {
    pub fn new(net: Network, model_id: impl Into<String>, max_side: usize) -> Self {
        AppState {
            net,
            model_id: model_id.into(),
            max_side,
            runs: AtomicU64::new(0),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentQuery {
    pub model: Option<String>,
    /// Dimensions of a raw 8-bit body; PNG bodies carry their own.
    pub width: Option<usize>,
    pub height: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleMask {
    /// Always `"rle-row-major"`: `(value, length)` pairs over rows.
    pub encoding: String,
    pub runs: Vec<(u8, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub run_id: String,
    pub model: String,
    pub width: usize,
    pub height: usize,
    pub mask: RleMask,
    /// Base64 PNG of the mask (0 or 255).
    pub mask_png: String,
    pub foreground: ProbabilitySummary,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model: String,
    pub spec: NetworkSpec,
    pub hooks: NetworkHooks,
    pub parameter_count: usize,
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn model(State(st): State<Arc<AppState>>) -> Json<ModelInfo> {
    Json(ModelInfo {
        model: st.model_id.clone(),
        spec: *st.net.spec(),
        hooks: st.net.hooks(),
        parameter_count: st.net.parameter_count(),
    })
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such route")
}

fn decode_body(body: &[u8], q: &SegmentQuery, max_side: usize) -> Result<Gray8, ApiError> {
    let too_large = |h: usize, w: usize| {
        ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image {h}x{w} exceeds the {max_side} pixel side limit"),
        )
    };
    if body.starts_with(PNG_MAGIC) {
        let img = decode_png(body).map_err(|e| ApiError::bad_request(format!("bad PNG: {e}")))?;
        if img.height > max_side || img.width > max_side {
            return Err(too_large(img.height, img.width));
        }
        return Ok(img);
    }
    match (q.height, q.width) {
        (Some(h), Some(w)) => {
            if h > max_side || w > max_side {
                return Err(too_large(h, w));
            }
            if h.checked_mul(w) != Some(body.len()) || body.is_empty() {
                return Err(ApiError::bad_request(format!(
                    "raw body has {} bytes, expected {h}x{w}",
                    body.len()
                )));
            }
            Gray8::new(h, w, body.to_vec()).map_err(|e| ApiError::bad_request(e.to_string()))
        }
        _ => Err(ApiError::bad_request(
            "body is neither a PNG nor raw bytes with width and height",
        )),
    }
}

async fn segment_handler(
    State(st): State<Arc<AppState>>,
    query: Result<Query<SegmentQuery>, QueryRejection>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<SegmentResponse>, ApiError> {
    let start = Instant::now();
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let body = body.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
    if let Some(m) = &q.model {
        if *m != st.model_id {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown model `{m}`")));
        }
    }
    let img = decode_body(&body, &q, st.max_side)?;
    let worker = Arc::clone(&st);
    let pred = tokio::task::spawn_blocking(move || segment(&worker.net, &img))
        .await
        .map_err(|e| {
            log::error!("inference task failed: {e}");
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
        })?
        .map_err(|e| {
            log::error!("inference failed: {e:#}");
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
        })?;
    let png = encode_mask_png(&pred.mask).map_err(|e| {
        log::error!("mask encoding failed: {e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
    })?;
    let run = st.runs.fetch_add(1, Ordering::Relaxed) + 1;
    let latency_ms = (start.elapsed().as_secs_f64() * 1e3).max(f64::MIN_POSITIVE);
    log::info!("run {run}: {}x{} in {latency_ms:.1} ms", pred.mask.height(), pred.mask.width());
    Ok(Json(SegmentResponse {
        run_id: format!("run-{run:08}"),
        model: st.model_id.clone(),
        width: pred.mask.width(),
        height: pred.mask.height(),
        mask: RleMask {
            encoding: "rle-row-major".into(),
            runs: rle_encode(&pred.mask),
        },
        mask_png: base64::engine::general_purpose::STANDARD.encode(png),
        foreground: ProbabilitySummary::of(&pred),
        latency_ms,
    }))
}

pub fn router(state: Arc<AppState>, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/model", get(model))
        .route("/v1/segment", post(segment_handler))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(state)
}

/// Binds `cfg.host:cfg.port` (port 0 picks a free one) and returns the bound
/// address with the server future.
pub async fn bind(
    state: Arc<AppState>,
    cfg: &ServeConfig,
) -> std::io::Result<(SocketAddr, impl std::future::Future<Output = std::io::Result<()>>)> {
    let listener = TcpListener::bind((cfg.host.as_str(), cfg.port)).await?;
    let addr = listener.local_addr()?;
    let app = router(state, cfg.max_body_bytes);
    Ok((addr, async move { axum::serve(listener, app).await }))
}
