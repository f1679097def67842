//! HTTP inference service.
//!
//! The model sits behind a lock that is only taken for writing when a
//! checkpoint is swapped in; requests clone the current `Arc` and run on
//! the blocking pool. A semaphore bounds in-flight work and turns overload
//! into 429 responses.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::{OwnedSemaphorePermit, RwLock, Semaphore};
use txst_core::checkpoint::Checkpoint;
use txst_core::data::artist_display_name;
use txst_core::image_io::decode_image;
use txst_core::inference::Stylizer;

use crate::pipeline;
use crate::wire::{
    request_schema, response_schema, ArtistsResponse, ErrorBody, HealthResponse, ModelResponse,
    StylizeRequest, WIRE_SCHEMA_VERSION,
};

pub const DEFAULT_MAX_UPLOAD: usize = 16 * 1024 * 1024;
pub const DEFAULT_MAX_SIDE: usize = 1024;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub max_upload_bytes: usize,
    pub max_side: usize,
    /// Requests admitted at once; further ones get 429.
    pub max_in_flight: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_upload_bytes: DEFAULT_MAX_UPLOAD,
            max_side: DEFAULT_MAX_SIDE,
            max_in_flight: 4,
        }
    }
}

pub struct AppState {
    model: RwLock<Option<Arc<Stylizer>>>,
    permits: Arc<Semaphore>,
    cfg: ServiceConfig,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Arc<Self> {
        Arc::new(AppState {
            model: RwLock::new(None),
            permits: Arc::new(Semaphore::new(cfg.max_in_flight.max(1))),
            cfg,
        })
    }

    /// Replaces the served model.
    pub async fn install(&self, stylizer: Stylizer) {
        *self.model.write().await = Some(Arc::new(stylizer));
    }

    /// Loads a checkpoint on the blocking pool and installs it.
    pub async fn load(&self, path: PathBuf) -> txst_core::Result<()> {
        let stylizer = tokio::task::spawn_blocking(move || {
            let ck = Checkpoint::load(&path)?;
            Stylizer::from_checkpoint(&ck, None)
        })
        .await
        .expect("loader task panicked")?;
        log::info!("model {} ready", stylizer.model_id());
        self.install(stylizer).await;
        Ok(())
    }

    /// One unit of request capacity, or `None` when saturated.
    pub fn reserve(&self) -> Option<OwnedSemaphorePermit> {
        Arc::clone(&self.permits).try_acquire_owned().ok()
    }

    async fn current(&self) -> Result<Arc<Stylizer>, ApiError> {
        self.model.read().await.clone().ok_or(ApiError::NotReady)
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotReady,
    BadRequest(String),
    TooLarge,
    Busy,
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error, message) = match self {
            ApiError::NotReady => (
                StatusCode::SERVICE_UNAVAILABLE,
                "not_ready",
                "no checkpoint loaded yet".to_string(),
            ),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m),
            ApiError::TooLarge => (
                StatusCode::PAYLOAD_TOO_LARGE,
                "too_large",
                "upload exceeds the size limit".to_string(),
            ),
            ApiError::Busy => (
                StatusCode::TOO_MANY_REQUESTS,
                "busy",
                "too many requests in flight".to_string(),
            ),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m),
        };
        (
            status,
            Json(ErrorBody {
                error: error.into(),
                message,
            }),
        )
            .into_response()
    }
}

impl From<txst_core::Error> for ApiError {
    fn from(e: txst_core::Error) -> Self {
        use txst_core::Error as E;
        match e {
            E::Prompt(_)
            | E::EmptyPrompt
            | E::PromptTooLong { .. }
            | E::Channels(_)
            | E::ImageTooSmall { .. }
            | E::Image(_)
            | E::Shape { .. }
            | E::ZeroNorm => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.cfg.max_upload_bytes;
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/artists", get(artists))
        .route("/v1/model", get(model))
        .route("/v1/schema", get(schema))
        .route("/v1/stylize", post(stylize))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.current().await {
        Ok(_) => Json(HealthResponse {
            status: "ready".into(),
        })
        .into_response(),
        Err(_) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(HealthResponse {
                status: "loading".into(),
            }),
        )
            .into_response(),
    }
}

async fn artists(State(state): State<Arc<AppState>>) -> Result<Json<ArtistsResponse>, ApiError> {
    let m = state.current().await?;
    Ok(Json(ArtistsResponse {
        schema_version: WIRE_SCHEMA_VERSION,
        artists: m
            .meta()
            .artists
            .iter()
            .map(|a| artist_display_name(a))
            .collect(),
    }))
}

async fn model(State(state): State<Arc<AppState>>) -> Result<Json<ModelResponse>, ApiError> {
    let m = state.current().await?;
    let meta = m.meta();
    Ok(Json(ModelResponse {
        schema_version: WIRE_SCHEMA_VERSION,
        model_id: m.model_id().to_string(),
        config_hash: meta.config_hash.clone(),
        fusion_order: m.fusion_order(),
        stage: meta.stage,
        iteration: meta.iteration,
        frozen: meta.frozen.clone(),
    }))
}

async fn schema() -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "schema_version": WIRE_SCHEMA_VERSION,
        "request": request_schema(),
        "response": response_schema(),
    }))
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::TooLarge
    } else {
        ApiError::BadRequest(e.body_text())
    }
}

/// Multipart fields: `content` (image), `request` (JSON), and one image
/// field per `image_ref` named in the request.
async fn stylize(
    State(state): State<Arc<AppState>>,
    mut form: Multipart,
) -> Result<Response, ApiError> {
    let stylizer = state.current().await?;
    let permit = state.reserve().ok_or(ApiError::Busy)?;
    let mut content = None;
    let mut request = None;
    let mut files: HashMap<String, Vec<u8>> = HashMap::new();
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(multipart_error)?;
        match name.as_str() {
            "content" => content = Some(bytes),
            "request" => {
                let r: StylizeRequest = serde_json::from_slice(&bytes)
                    .map_err(|e| ApiError::BadRequest(format!("request: {e}")))?;
                request = Some(r);
            }
            _ => {
                files.insert(name, bytes.to_vec());
            }
        }
    }
    let content = content.ok_or_else(|| ApiError::BadRequest("missing content field".into()))?;
    let request = request.ok_or_else(|| ApiError::BadRequest("missing request field".into()))?;
    request.validate().map_err(ApiError::BadRequest)?;
    let max_side = state.cfg.max_side;
    let result = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let content = decode_image(&content)?;
        let mut images = HashMap::new();
        for r in request.image_refs() {
            let bytes = files.get(r).ok_or_else(|| {
                txst_core::Error::Prompt(format!("no multipart field for image_ref {r:?}"))
            })?;
            images.insert(r.to_string(), decode_image(bytes)?);
        }
        pipeline::stylize(&stylizer, &content, &images, &request, Some(max_side))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(result.response).into_response())
}
