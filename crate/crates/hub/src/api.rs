//! HTTP routes. JSON bodies, except episode files which travel as
//! `application/octet-stream`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use uuid::Uuid;

use crate::store::{IndexEntry, StoreError};
use crate::tokens::Principal;
use crate::Hub;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::Malformed(_) => StatusCode::BAD_REQUEST,
            StoreError::Attribution { .. } | StoreError::Forbidden(_) => StatusCode::FORBIDDEN,
            StoreError::Conflict(_) => StatusCode::CONFLICT,
            StoreError::Full { .. } => StatusCode::INSUFFICIENT_STORAGE,
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Corrupt(_) | StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

#[derive(Debug, Serialize)]
pub struct Listing {
    pub episode_id: Uuid,
    pub url: String,
    pub scene_id: String,
    pub size: u64,
    pub created_at: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
}

fn listing(e: IndexEntry, with_user: bool) -> Listing {
    Listing {
        url: format!("/api/v1/episodes/{}", e.episode_id),
        episode_id: e.episode_id,
        scene_id: e.scene_id,
        size: e.size,
        created_at: e.created_at,
        user_id: with_user.then_some(e.user_id),
    }
}

fn authenticate(hub: &Hub, headers: &HeaderMap) -> Result<Principal, ApiError> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing bearer token"))?;
    hub.tokens
        .authenticate(token)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "invalid or revoked token"))
}

/// Runs blocking store work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, StoreError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn upload(State(hub): State<Arc<Hub>>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let who = authenticate(&hub, &headers)?;
    let stored = blocking(move || hub.store.put(&who, &body)).await?;
    let status = if stored.duplicate { StatusCode::OK } else { StatusCode::CREATED };
    Ok((status, Json(serde_json::json!({ "episode_id": stored.episode_id, "duplicate": stored.duplicate }))).into_response())
}

async fn my_data(State(hub): State<Arc<Hub>>, headers: HeaderMap) -> Result<Json<Vec<Listing>>, ApiError> {
    let who = authenticate(&hub, &headers)?;
    Ok(Json(hub.store.list_user(&who.user_id).into_iter().map(|e| listing(e, false)).collect()))
}

async fn global_data(State(hub): State<Arc<Hub>>, headers: HeaderMap) -> Result<Json<Vec<Listing>>, ApiError> {
    authenticate(&hub, &headers)?;
    Ok(Json(hub.store.list_curated().into_iter().map(|e| listing(e, true)).collect()))
}

fn parse_id(raw: &str) -> Result<Uuid, ApiError> {
    Uuid::parse_str(raw).map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("no episode `{raw}`")))
}

async fn fetch(State(hub): State<Arc<Hub>>, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, ApiError> {
    let who = authenticate(&hub, &headers)?;
    let id = parse_id(&id)?;
    let bytes = blocking(move || hub.store.fetch(&who.user_id, id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn curate(State(hub): State<Arc<Hub>>, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, ApiError> {
    let who = authenticate(&hub, &headers)?;
    if !who.admin {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "admin token required"));
    }
    let id = parse_id(&id)?;
    let entry = blocking(move || hub.store.set_curated(id, true)).await?;
    Ok(Json(serde_json::json!({ "episode_id": entry.episode_id, "curated": entry.curated })).into_response())
}

/// The DexHub routes under `/api/v1`.
pub fn router(hub: Arc<Hub>) -> Router {
    let limit = hub.max_upload_bytes;
    Router::new()
        .route("/api/v1/log", post(upload).layer(DefaultBodyLimit::max(limit)))
        .route("/api/v1/get-my-data", get(my_data))
        .route("/api/v1/get-global-data", get(global_data))
        .route("/api/v1/episodes/{id}", get(fetch))
        .route("/api/v1/admin/curate/{id}", post(curate))
        .with_state(hub)
}
