//! HTTP inpainting service.
//!
//! `GET /health`, `GET /version` and `POST /inpaint` (multipart fields
//! `image` and `mask`, white = hole). Requests beyond the concurrency limit
//! plus the queue depth are turned away with 429.

use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use inclg_core::data::mask_from_luma;
use inclg_core::inference::InpaintModel;
use inclg_core::types::{BinaryMask, FaceImage};
use serde::Serialize;
use serde_json::json;
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;

/// Upload size limit per request.
pub const MAX_BODY_BYTES: usize = 32 << 20;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Requests processed at once.
    pub workers: usize,
    /// Requests allowed to wait for a worker before 429.
    pub queue: usize,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions { workers: 1, queue: 8 }
    }
}

#[derive(Clone)]
struct AppState {
    model: Arc<InpaintModel>,
    admitted: Arc<Semaphore>,
    workers: Arc<Semaphore>,
}

#[derive(Debug, Serialize)]
pub struct InpaintResponse {
    /// Inpainted image, PNG, base64.
    pub image_b64: String,
    /// 136 values, `x0 y0 x1 y1 ...`, normalized to [0, 1] of the image size.
    pub landmarks: Vec<f32>,
    pub width: usize,
    pub height: usize,
    pub latency_ms: f64,
    pub checkpoint_hash: String,
    pub no_op: bool,
    pub warnings: Vec<String>,
}

/// Error body: `{"error": code, "reason": text}` plus a correlation id on 500.
#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    code: &'static str,
    reason: String,
    id: Option<String>,
}

impl ApiError {
    fn bad(code: &'static str, reason: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, code, reason: reason.into(), id: None }
    }

    fn internal(reason: impl std::fmt::Display) -> Self {
        let id = uuid::Uuid::new_v4().to_string();
        log::error!("request {id} failed: {reason}");
        ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, code: "internal", reason: "inference failed".into(), id: Some(id) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "reason": self.reason });
        if let Some(id) = self.id {
            body["correlation_id"] = id.into();
        }
        (self.status, Json(body)).into_response()
    }
}

pub fn router(model: Arc<InpaintModel>, opts: &ServerOptions) -> Router {
    let workers = opts.workers.max(1);
    let state = AppState {
        model,
        admitted: Arc::new(Semaphore::new(workers + opts.queue)),
        workers: Arc::new(Semaphore::new(workers)),
    };
    Router::new()
        .route("/health", get(health))
        .route("/version", get(version))
        .route("/inpaint", post(inpaint))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(model: Arc<InpaintModel>, addr: SocketAddr, opts: ServerOptions) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving checkpoint {} on http://{}", model.id(), listener.local_addr()?);
    axum::serve(listener, router(model, &opts))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "checkpoint_hash": s.model.id() }))
}

async fn version(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "image_size": s.model.image_size(),
        "checkpoint_hash": s.model.id(),
    }))
}

async fn inpaint(State(s): State<AppState>, multipart: Multipart) -> Result<Json<InpaintResponse>, Response> {
    let Ok(_admitted) = s.admitted.clone().try_acquire_owned() else {
        return Err((StatusCode::TOO_MANY_REQUESTS, Json(json!({ "error": "busy", "reason": "request queue is full" }))).into_response());
    };
    let (image, mask) = read_upload(multipart).await.map_err(IntoResponse::into_response)?;
    let _worker = s.workers.clone().acquire_owned().await.map_err(|e| ApiError::internal(e).into_response())?;
    let model = s.model.clone();
    let result = tokio::task::spawn_blocking(move || model.infer_native(&image, &mask))
        .await
        .map_err(|e| ApiError::internal(e).into_response())?
        .map_err(|e| ApiError::internal(e).into_response())?;
    let mut png = Vec::new();
    result
        .inpainted
        .to_rgb8()
        .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| ApiError::internal(e).into_response())?;
    Ok(Json(InpaintResponse {
        image_b64: base64::engine::general_purpose::STANDARD.encode(&png),
        landmarks: result.landmarks.values().to_vec(),
        width: result.inpainted.width(),
        height: result.inpainted.height(),
        latency_ms: result.latency_ms,
        checkpoint_hash: result.model_id,
        no_op: result.no_op,
        warnings: result.warnings,
    }))
}

async fn read_upload(mut multipart: Multipart) -> Result<(FaceImage, BinaryMask), ApiError> {
    let (mut image, mut mask) = (None, None);
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::bad("malformed_upload", e.body_text()))? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::bad("malformed_upload", e.body_text()))?;
        match name.as_str() {
            "image" => image = Some(bytes),
            "mask" => mask = Some(bytes),
            _ => log::debug!("ignoring form field {name:?}"),
        }
    }
    let image = image.ok_or_else(|| ApiError::bad("missing_field", "form field `image` is required"))?;
    let mask = mask.ok_or_else(|| ApiError::bad("missing_field", "form field `mask` is required"))?;
    let image = image::load_from_memory(&image).map_err(|e| ApiError::bad("bad_image", format!("cannot decode image: {e}")))?;
    let mask = image::load_from_memory(&mask).map_err(|e| ApiError::bad("bad_mask", format!("cannot decode mask: {e}")))?;
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(ApiError::bad(
            "size_mismatch",
            format!("image is {}x{} but mask is {}x{}", image.width(), image.height(), mask.width(), mask.height()),
        ));
    }
    if image.width() == 0 || image.height() == 0 {
        return Err(ApiError::bad("bad_image", "image is empty"));
    }
    Ok((FaceImage::from_rgb8(&image.to_rgb8()), mask_from_luma(&mask.to_luma8())))
}
