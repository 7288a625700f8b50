//! Session-oriented HTTP API.
//!
//! Routes:
//! - `POST /sessions` `{model_id?}` creates an empty session
//! - `POST /sessions/{id}/pairs` `{original, retouched, content_class?}` (base64 PNG)
//! - `DELETE /sessions/{id}/pairs/{idx}`
//! - `POST /sessions/{id}/enhance` `{image, method?}`
//! - `GET /healthz`
//!
//! Errors are JSON `{code, message}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::corpus::{PreferredPair, PreferredSet};
use crate::error::Error;
use crate::image::Image;
use crate::nets::MsmModel;
use crate::personalize::{personalize_batch, Method, PreparedSet};

pub const DEFAULT_MODEL_ID: &str = "default";

#[derive(Clone, Debug)]
pub struct Session {
    pub session_id: String,
    pub model_id: String,
    pub created_at: u64,
    pub pairs: Vec<PreferredPair>,
}

/// Frozen models plus the session table.
pub struct AppState {
    models: HashMap<String, Arc<MsmModel>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(models: HashMap<String, Arc<MsmModel>>) -> Self {
        Self { models, sessions: RwLock::new(HashMap::new()) }
    }

    /// A state serving one model under [`DEFAULT_MODEL_ID`].
    pub fn single(model: MsmModel) -> Self {
        Self::new(HashMap::from([(DEFAULT_MODEL_ID.to_string(), Arc::new(model))]))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions.read().get(id).cloned().ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into() } }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Decode(_) => Self::new(StatusCode::BAD_REQUEST, "decode_error", e.to_string()),
            Error::EmptyPreferredSet => Self::new(StatusCode::CONFLICT, "empty_session", e.to_string()),
            Error::InvalidInput(_) | Error::DimensionMismatch { .. } => Self::new(StatusCode::BAD_REQUEST, "invalid_input", e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Default, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub model_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub model_id: String,
    pub created_at: u64,
}

#[derive(Debug, Deserialize)]
pub struct AddPair {
    pub original: String,
    pub retouched: String,
    #[serde(default)]
    pub content_class: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairCount {
    pub count: usize,
}

#[derive(Debug, Deserialize)]
pub struct EnhanceRequest {
    pub image: String,
    #[serde(default)]
    pub method: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnhanceResponse {
    pub image: String,
    pub method: Method,
    /// Per preferred pair, for the masked method only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<f64>>,
    pub predicted_style_norm: f64,
}

fn decode_b64_png(field: &str, s: &str) -> Result<Image, ApiError> {
    let bytes = B64
        .decode(s.trim())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "decode_error", format!("`{field}` is not valid base64: {e}")))?;
    Image::decode_png(&bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "decode_error", format!("`{field}`: {e}")))
}

pub fn encode_b64_png(img: &Image) -> Result<String, Error> {
    Ok(B64.encode(img.encode_png()?))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(State(st): State<Arc<AppState>>, body: Option<Json<CreateSession>>) -> ApiResult<SessionCreated> {
    let model_id = body.and_then(|b| b.0.model_id).unwrap_or_else(|| DEFAULT_MODEL_ID.to_string());
    if !st.models.contains_key(&model_id) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_model", format!("no model `{model_id}` is loaded")));
    }
    let session_id = uuid::Uuid::new_v4().to_string();
    let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let session = Session { session_id: session_id.clone(), model_id: model_id.clone(), created_at, pairs: Vec::new() };
    st.sessions.write().insert(session_id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(SessionCreated { session_id, model_id, created_at }))
}

async fn add_pair(State(st): State<Arc<AppState>>, Path(id): Path<String>, Json(req): Json<AddPair>) -> ApiResult<PairCount> {
    let session = st.session(&id)?;
    let model = st.models[&session.lock().model_id].clone();
    let side = model.cfg.enhancer_input_size;
    let original = decode_b64_png("original", &req.original)?.resize(side, side)?;
    let retouched = decode_b64_png("retouched", &req.retouched)?.resize(side, side)?;
    let pair = PreferredPair::new(original, retouched, req.content_class)?;
    let mut s = session.lock();
    s.pairs.push(pair);
    Ok(Json(PairCount { count: s.pairs.len() }))
}

async fn delete_pair(State(st): State<Arc<AppState>>, Path((id, idx)): Path<(String, usize)>) -> ApiResult<PairCount> {
    let session = st.session(&id)?;
    let mut s = session.lock();
    if idx >= s.pairs.len() {
        return Err(ApiError::not_found(format!("pair index {idx} out of range (session holds {})", s.pairs.len())));
    }
    s.pairs.remove(idx);
    Ok(Json(PairCount { count: s.pairs.len() }))
}

async fn enhance(State(st): State<Arc<AppState>>, Path(id): Path<String>, Json(req): Json<EnhanceRequest>) -> ApiResult<EnhanceResponse> {
    let session = st.session(&id)?;
    let method: Method = req.method.as_deref().unwrap_or("masked").parse()?;
    let unseen = decode_b64_png("image", &req.image)?;
    let (model, pairs) = {
        let s = session.lock();
        (st.models[&s.model_id].clone(), s.pairs.clone())
    };
    if pairs.is_empty() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "empty_session",
            "the session has no preferred pairs yet; add at least one (original, retouched) pair first",
        ));
    }
    let out = tokio::task::spawn_blocking(move || -> Result<EnhanceResponse, Error> {
        let prefs = PreferredSet::new(id, pairs)?;
        let prepared = PreparedSet::new(&model, &prefs)?;
        let (img, style, attention) = personalize_batch(&model, &prepared, method, &[&unseen])?.remove(0);
        Ok(EnhanceResponse { image: encode_b64_png(&img)?, method, attention, predicted_style_norm: style.norm() })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(out))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/pairs", post(add_pair))
        .route("/sessions/{id}/pairs/{idx}", delete(delete_pair))
        .route("/sessions/{id}/enhance", post(enhance))
        .with_state(state)
}

/// Binds `addr` and serves until the process is interrupted.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
