//! Local render service for the viewer.
//!
//! - `GET /session`: scene metadata, canonical camera and pose bounds.
//! - `POST /render` `{"pose": [12 floats, row-major 3×4], "width": W, "height": H}`:
//!   PNG frame; `x-render-ms` and `x-render-timestamp-us` headers.
//! - `POST /style`: multipart with the style PNG in a `style` field; returns
//!   `{"style_id", "cache_hit"}`.
//! - `GET /healthz`.
//!
//! Malformed requests get 400; poses outside the session bounds get 422 with
//! the bounds in the body.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use super::RenderSession;
use crate::error::Error;
use crate::image::RgbImage;

/// Upload cap for style images.
pub const MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;

#[derive(Clone)]
struct AppState {
    session: Arc<RenderSession>,
    started: Instant,
    style_gate: Arc<tokio::sync::Mutex<()>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderRequest {
    pose: Vec<f64>,
    width: Option<usize>,
    height: Option<usize>,
}

fn failure(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn error_response(session: &RenderSession, e: Error) -> Response {
    match e {
        Error::PoseOutOfBounds(detail) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(json!({ "error": format!("pose outside bounds: {detail}"), "bounds": session.bounds() })),
        )
            .into_response(),
        Error::InvalidArgument(_) | Error::InvalidCamera(_) | Error::Format { .. } | Error::ImageTooSmall { .. } => {
            failure(StatusCode::BAD_REQUEST, e.to_string())
        }
        e => {
            log::error!("{e}");
            failure(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
    }
}

pub fn router(session: Arc<RenderSession>) -> Router {
    let state = AppState {
        session,
        started: Instant::now(),
        style_gate: Arc::new(tokio::sync::Mutex::new(())),
    };
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/session", get(session_info))
        .route("/render", post(render))
        .route("/style", post(style))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES + 64 * 1024))
        .with_state(state)
}

async fn session_info(State(s): State<AppState>) -> Response {
    Json(s.session.info()).into_response()
}

async fn render(State(s): State<AppState>, body: Bytes) -> Response {
    let req: RenderRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return failure(StatusCode::BAD_REQUEST, format!("malformed render request: {e}")),
    };
    let session = s.session.clone();
    let start = Instant::now();
    let canonical = session.canonical();
    let (w, h) = (req.width.unwrap_or(canonical.width), req.height.unwrap_or(canonical.height));
    let cam = match session.check_pose(&req.pose).and_then(|p| session.camera(p, w, h)) {
        Ok(c) => c,
        Err(e) => return error_response(&session, e),
    };
    let worker = session.clone();
    let png = match tokio::task::spawn_blocking(move || worker.render_png(&cam)).await {
        Ok(Ok(png)) => png,
        Ok(Err(e)) => return error_response(&session, e),
        Err(e) => return failure(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let millis = start.elapsed().as_secs_f64() * 1e3;
    let stamp = s.started.elapsed().as_micros();
    let mut resp = png.into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert("x-render-ms", HeaderValue::from_str(&format!("{millis:.3}")).expect("ascii"));
    headers.insert("x-render-timestamp-us", HeaderValue::from(stamp as u64));
    resp
}

async fn style(State(s): State<AppState>, mut multipart: Multipart) -> Response {
    let mut upload = None;
    loop {
        match multipart.next_field().await {
            Ok(Some(field)) if field.name() == Some("style") => match field.bytes().await {
                Ok(b) => {
                    upload = Some(b);
                    break;
                }
                Err(e) => return failure(StatusCode::BAD_REQUEST, e.to_string()),
            },
            Ok(Some(_)) => continue,
            Ok(None) => break,
            Err(e) => return failure(StatusCode::BAD_REQUEST, e.to_string()),
        }
    }
    let Some(bytes) = upload else {
        return failure(StatusCode::BAD_REQUEST, "multipart body needs a `style` field");
    };
    if bytes.len() > MAX_UPLOAD_BYTES {
        return failure(StatusCode::PAYLOAD_TOO_LARGE, "style image exceeds 10 MB");
    }
    let image = match RgbImage::decode_png(&bytes) {
        Ok(i) => i,
        Err(e) => return error_response(&s.session, e),
    };
    let _exclusive = s.style_gate.lock().await;
    let worker = s.session.clone();
    match tokio::task::spawn_blocking(move || worker.set_style(&image)).await {
        Ok(Ok(update)) => Json(update).into_response(),
        Ok(Err(e)) => error_response(&s.session, e),
        Err(e) => failure(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Serves until the process is stopped.
pub async fn serve(session: Arc<RenderSession>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(session)).await
}
