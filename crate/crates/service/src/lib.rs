//! JSON-over-HTTP sessions for interactive, chunk-at-a-time rollouts.
//!
//! | method | path | body |
//! |---|---|---|
//! | POST | `/sessions` | config overrides (optional) |
//! | POST | `/sessions/{id}/scene` | scene JSON |
//! | POST | `/sessions/{id}/camera` | camera script JSON |
//! | POST | `/sessions/{id}/trajectory` | trajectory JSON |
//! | POST | `/sessions/{id}/step` | `{"chunk": k}` (optional) |
//! | GET | `/sessions/{id}/memory` `tracks` `events` `metrics` | |
//! | GET | `/sessions/{id}/frames/{t}` | PNG |
//! | GET | `/healthz` | |

pub mod error;
pub mod session;
pub mod store;

use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::net::TcpListener;

pub use error::ApiError;
pub use session::SessionData;
pub use store::Store;

use session::{merge_config, StepResponse};
use store::Entry;

pub type AppState = Arc<Store>;

pub fn router(store: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/scene", post(set_scene))
        .route("/sessions/{id}/camera", post(set_camera))
        .route("/sessions/{id}/trajectory", post(add_trajectory))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/memory", get(memory))
        .route("/sessions/{id}/tracks", get(tracks))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/sessions/{id}/frames/{t}", get(frame))
        .with_state(store)
}

/// Serves until `shutdown` resolves, then flushes every session to disk.
pub async fn serve(listener: TcpListener, store: AppState, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, router(store.clone())).with_graceful_shutdown(shutdown).await?;
    store.flush_all().map_err(|e| std::io::Error::other(e.message))?;
    Ok(())
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

fn parse_json(body: &Bytes) -> Result<Value, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(Value::Object(Default::default()));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON: {e}")))
}

fn body_text(body: &Bytes) -> Result<&str, ApiError> {
    std::str::from_utf8(body).map_err(|_| ApiError::bad_request("body is not UTF-8"))
}

async fn create_session(State(store): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let overrides = parse_json(&body)?;
    let config = merge_config(store.defaults(), &overrides)?;
    let data = tokio::task::spawn_blocking(move || store.create(config)).await.map_err(|e| ApiError::internal(e.to_string()))??;
    Ok((axum::http::StatusCode::CREATED, Json(json!({ "id": data.id, "config": data.config }))).into_response())
}

/// Runs `f` on a copy of the session under its writer lock and commits the
/// result. With `wait == false` a busy session is rejected instead of
/// queued.
async fn mutate<R, F>(store: AppState, entry: Arc<Entry>, wait: bool, f: F) -> Result<R, ApiError>
where
    R: Send + 'static,
    F: FnOnce(&mut SessionData) -> Result<R, ApiError> + Send + 'static,
{
    let guard = if wait {
        entry.writer.clone().lock_owned().await
    } else {
        entry
            .writer
            .clone()
            .try_lock_owned()
            .map_err(|_| ApiError::conflict("a step is already in flight for this session"))?
    };
    tokio::task::spawn_blocking(move || {
        let mut data = (*entry.snapshot()).clone();
        let out = f(&mut data)?;
        store.commit(&entry, data)?;
        drop(guard);
        Ok(out)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn set_scene(State(store): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let entry = store.get(&id)?;
    let text = body_text(&body)?.to_string();
    let report = mutate(store, entry, true, move |s| s.set_scene(&text)).await?;
    Ok(Json(json!(report)))
}

async fn set_camera(State(store): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let entry = store.get(&id)?;
    let text = body_text(&body)?.to_string();
    let report = mutate(store, entry, true, move |s| s.set_camera(&text)).await?;
    Ok(Json(json!(report)))
}

async fn add_trajectory(State(store): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let entry = store.get(&id)?;
    let text = body_text(&body)?.to_string();
    let report = mutate(store, entry, true, move |s| s.add_trajectory(&text)).await?;
    Ok(Json(json!(report)))
}

async fn step(State(store): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<StepResponse>, ApiError> {
    let entry = store.get(&id)?;
    let token = match parse_json(&body)? {
        Value::Object(m) => match m.get("chunk") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_u64().ok_or_else(|| ApiError::bad_request("chunk must be a non-negative integer").with_field("chunk"))? as usize),
        },
        _ => return Err(ApiError::bad_request("step body must be an object")),
    };
    if let Some(r) = entry.snapshot().step_precheck(token)? {
        return Ok(Json(r));
    }
    let out = mutate(store, entry, false, move |s| match s.step_precheck(token)? {
        Some(r) => Ok(r),
        None => s.step(),
    })
    .await?;
    Ok(Json(out))
}

async fn memory(State(store): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(json!(store.get(&id)?.snapshot().memory())))
}

async fn tracks(State(store): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(json!({ "tracks": store.get(&id)?.snapshot().tracks() })))
}

async fn events(State(store): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(json!({ "events": store.get(&id)?.snapshot().events() })))
}

async fn metrics(State(store): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let snap = store.get(&id)?.snapshot();
    let reports = tokio::task::spawn_blocking(move || snap.metrics()).await.map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(json!({ "reports": reports })))
}

async fn frame(State(store): State<AppState>, Path((id, t)): Path<(String, String)>) -> Result<Response, ApiError> {
    let t: usize = t.parse().map_err(|_| ApiError::bad_request(format!("invalid frame index {t:?}")))?;
    let snap = store.get(&id)?.snapshot();
    let png = tokio::task::spawn_blocking(move || snap.frame_png(t)).await.map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
