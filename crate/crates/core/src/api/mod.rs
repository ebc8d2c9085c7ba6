//! Authenticated HTTP JSON service over the sample store.
//!
//! | route                                  | auth | success                      |
//! |----------------------------------------|------|------------------------------|
//! | `POST /api/login`                      | no   | `{token, expires}`           |
//! | `GET /api/devices`                     | yes  | `[{name, unit, last_seen}]`  |
//! | `GET /api/devices/{name}/latest`       | yes  | sample, or 204 before any    |
//! | `GET /api/devices/{name}/records`      | yes  | `{"<name>": [row, ...]}`     |

mod auth;
pub mod legacy;

pub use auth::{AuthRecord, Credentials, SessionToken, TokenStore, DEFAULT_ITERATIONS};

use std::io;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio_util::sync::CancellationToken;
use tower_http::services::ServeDir;
use tracing::warn;

use crate::sample::{format_ts, Sample};
use crate::store::{RowFilter, Store, StoreError};
use legacy::LegacyRow;

pub const DEFAULT_RECORD_LIMIT: usize = 1000;
pub const MAX_RECORD_LIMIT: usize = 10_000;
pub const TRUNCATED_HEADER: &str = "x-truncated";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeviceInfo {
    pub name: String,
    pub unit: u8,
}

pub struct ApiConfig {
    pub devices: Vec<DeviceInfo>,
    pub store_path: PathBuf,
    pub users: Vec<AuthRecord>,
    pub token_ttl: chrono::Duration,
    /// Optional directory of dashboard assets served at `/`.
    pub static_dir: Option<PathBuf>,
}

/// Lazily opened read-only store handle, refreshed on every query.
struct StoreView {
    path: PathBuf,
    store: Mutex<Option<Store>>,
}

impl StoreView {
    fn with<T>(&self, f: impl FnOnce(Option<&Store>) -> T) -> Result<T, StoreError> {
        let mut guard = self.store.lock().unwrap();
        match guard.as_mut() {
            Some(store) => store.refresh()?,
            None => match Store::open_read_only(&self.path) {
                Ok(store) => *guard = Some(store),
                Err(StoreError::Io(e)) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            },
        }
        Ok(f(guard.as_ref()))
    }
}

#[derive(Clone)]
pub struct ApiState {
    inner: Arc<Inner>,
}

struct Inner {
    devices: Vec<DeviceInfo>,
    store: StoreView,
    credentials: Credentials,
    tokens: TokenStore,
}

impl ApiState {
    pub fn new(config: ApiConfig) -> ApiState {
        ApiState {
            inner: Arc::new(Inner {
                devices: config.devices,
                store: StoreView { path: config.store_path, store: Mutex::new(None) },
                credentials: Credentials::new(config.users),
                tokens: TokenStore::new(config.token_ttl),
            }),
        }
    }

    fn device(&self, name: &str) -> Result<&DeviceInfo, ApiError> {
        self.inner.devices.iter().find(|d| d.name == name).ok_or(ApiError::NotFound)
    }
}

pub fn router(state: ApiState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/login", post(login))
        .route("/api/devices", get(devices))
        .route("/api/devices/{name}/latest", get(latest))
        .route("/api/devices/{name}/records", get(records))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve until `cancel` fires.
pub async fn serve(listener: TcpListener, config: ApiConfig, cancel: CancellationToken) -> io::Result<()> {
    let static_dir = config.static_dir.clone();
    let app = router(ApiState::new(config), static_dir);
    axum::serve(listener, app)
        .with_graceful_shutdown(async move { cancel.cancelled().await })
        .await
}

#[derive(Debug)]
enum ApiError {
    BadRequest(String),
    Unauthorized,
    BadCredentials,
    NotFound,
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Unauthorized => {
                let mut resp = (StatusCode::UNAUTHORIZED, Json(json!({"error": "unauthorized"}))).into_response();
                resp.headers_mut().insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
                return resp;
            }
            // same body whether the user exists or not
            ApiError::BadCredentials => (StatusCode::UNAUTHORIZED, "invalid credentials".to_owned()),
            ApiError::NotFound => (StatusCode::NOT_FOUND, "not found".to_owned()),
            ApiError::Internal(m) => {
                warn!(error = %m, "request failed");
                (StatusCode::INTERNAL_SERVER_ERROR, "internal error".to_owned())
            }
        };
        (status, Json(json!({ "error": msg }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::InvalidRange { .. } | StoreError::InvalidLimit(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

/// Proof that the request carried a live bearer token.
struct Authed;

impl FromRequestParts<ApiState> for Authed {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &ApiState) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or(ApiError::Unauthorized)?;
        if state.inner.tokens.is_live(token.trim()) {
            Ok(Authed)
        } else {
            Err(ApiError::Unauthorized)
        }
    }
}

#[derive(Deserialize)]
struct LoginRequest {
    username: String,
    password: String,
}

async fn login(
    State(state): State<ApiState>,
    body: Result<Json<LoginRequest>, JsonRejection>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let inner = state.inner.clone();
    let ok = tokio::task::spawn_blocking(move || inner.credentials.check(&req.username, &req.password))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    if !ok {
        return Err(ApiError::BadCredentials);
    }
    let session = state.inner.tokens.issue();
    Ok(Json(json!({ "token": session.token, "expires": format_ts(&session.expires) })))
}

fn latest_sample(store: Option<&Store>, device: &str) -> Option<Sample> {
    let row = store?.query_latest(device).ok()??;
    row.sample().cloned()
}

async fn devices(_: Authed, State(state): State<ApiState>) -> Result<Json<serde_json::Value>, ApiError> {
    let list = state.inner.store.with(|store| {
        state
            .inner
            .devices
            .iter()
            .map(|d| {
                let last_seen = latest_sample(store, &d.name).map(|s| format_ts(&s.ts));
                json!({ "name": d.name, "unit": d.unit, "last_seen": last_seen })
            })
            .collect::<Vec<_>>()
    })?;
    Ok(Json(serde_json::Value::Array(list)))
}

async fn latest(_: Authed, State(state): State<ApiState>, Path(name): Path<String>) -> Result<Response, ApiError> {
    state.device(&name)?;
    let sample = state.inner.store.with(|store| latest_sample(store, &name))?;
    Ok(match sample {
        Some(s) => Json(s).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Deserialize)]
struct RecordsQuery {
    from: Option<String>,
    to: Option<String>,
    limit: Option<usize>,
}

fn parse_ts(raw: Option<&str>, default: DateTime<Utc>) -> Result<DateTime<Utc>, ApiError> {
    match raw {
        None => Ok(default),
        Some(s) => DateTime::parse_from_rfc3339(s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| ApiError::BadRequest(format!("bad timestamp '{s}': {e}"))),
    }
}

async fn records(
    _: Authed,
    State(state): State<ApiState>,
    Path(name): Path<String>,
    query: Result<Query<RecordsQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    state.device(&name)?;
    let Query(q) = query.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let from = parse_ts(q.from.as_deref(), DateTime::<Utc>::MIN_UTC)?;
    let to = parse_ts(q.to.as_deref(), DateTime::<Utc>::MAX_UTC)?;
    let limit = q.limit.unwrap_or(DEFAULT_RECORD_LIMIT);
    if limit == 0 || limit > MAX_RECORD_LIMIT {
        return Err(ApiError::BadRequest(format!("limit must be within 1..={MAX_RECORD_LIMIT}")));
    }
    if from > to {
        return Err(ApiError::BadRequest("from is after to".into()));
    }
    let result = state.inner.store.with(|store| match store {
        Some(store) => match store.query_range(&name, from, to, limit, RowFilter::SamplesOnly) {
            Err(StoreError::UnknownDevice(_)) => Ok((Vec::new(), false)),
            other => other.map(|r| {
                let rows = r.rows.iter().filter_map(LegacyRow::from_stored).collect();
                (rows, r.truncated)
            }),
        },
        None => Ok((Vec::new(), false)),
    })??;
    let (rows, truncated) = result;
    let body = legacy::render(&name, &rows);
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("application/json")),
            (
                header::HeaderName::from_static(TRUNCATED_HEADER),
                HeaderValue::from_static(if truncated { "true" } else { "false" }),
            ),
        ],
        body,
    )
        .into_response())
}
