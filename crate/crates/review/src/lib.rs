//! JSON-over-HTTP access to a review queue.
//!
//! | method | path | body / reply |
//! |---|---|---|
//! | GET | `/api/queue?status=&image_id=&region=&offset=&limit=` | [`QueuePage`] |
//! | GET | `/api/items/{id}` | [`ReviewItem`] |
//! | POST | `/api/items/{id}/decision` | [`DecisionRequest`] → [`ReviewItem`] |
//! | GET | `/api/images/{id}` | image bytes |
//! | GET | `/api/images/{id}/overlay` | [`ImageOverlay`] |
//! | GET | `/api/progress` | [`Progress`] |
//!
//! A decision body looks like `{"action": "accept", "suggestion": 0, "reviewer": "kb"}`;
//! other actions are `edit` and `add-missing` (with `"bbox": [x, y, w, h]`) and `reject`.
//! Errors come back as `{"error": "..."}` with a 4xx status.

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;
use tower_http::services::ServeDir;

use boxclean::correction::{Decision, ImageOverlay, ReviewItem, ReviewStatus};
use boxclean::ledger::CostModel;
use boxclean::lsm::Region;
use boxclean::queue::{Progress, QueueFilter, QueueStore};
use boxclean::Error as CoreError;

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Directory holding the image files named in the overlays.
    pub images_dir: Option<PathBuf>,
    /// Built review UI, served at `/`.
    pub ui_dir: Option<PathBuf>,
    /// When set, `/api` requires `Authorization: Bearer <token>`.
    pub token: Option<String>,
    pub costs: CostModel,
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<RwLock<QueueStore>>,
    config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(store: QueueStore, config: ServiceConfig) -> Self {
        AppState {
            store: Arc::new(RwLock::new(store)),
            config: Arc::new(config),
        }
    }

    /// Shared handle on the store, e.g. to apply the decisions after shutdown.
    pub fn store(&self) -> Arc<RwLock<QueueStore>> {
        self.store.clone()
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
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match &e {
            CoreError::UnknownItem(_) | CoreError::MissingImage(_) => StatusCode::NOT_FOUND,
            CoreError::InvalidDecision { .. } | CoreError::InvalidBox { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, Default, Deserialize)]
pub struct QueueQuery {
    pub status: Option<ReviewStatus>,
    pub image_id: Option<u64>,
    pub region: Option<Region>,
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueuePage {
    /// Items matching the filter, over all pages.
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<ReviewItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRequest {
    #[serde(flatten)]
    pub decision: Decision,
    #[serde(default)]
    pub reviewer: Option<String>,
}

async fn get_queue(State(app): State<AppState>, Query(q): Query<QueueQuery>) -> ApiResult<QueuePage> {
    let filter = QueueFilter {
        status: q.status,
        image_id: q.image_id,
        region: q.region,
    };
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
    let store = app.store.read().await;
    let total = store.filtered(&filter).count();
    let items = store.filtered(&filter).skip(offset).take(limit).cloned().collect();
    Ok(Json(QueuePage {
        total,
        offset,
        limit,
        items,
    }))
}

async fn get_item(State(app): State<AppState>, Path(id): Path<u64>) -> ApiResult<ReviewItem> {
    let store = app.store.read().await;
    let item = store.item(id).ok_or(CoreError::UnknownItem(id))?;
    Ok(Json(item.clone()))
}

async fn post_decision(
    State(app): State<AppState>,
    Path(id): Path<u64>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> ApiResult<ReviewItem> {
    let Json(req) = body?;
    let reviewer = req.reviewer.unwrap_or_default();
    let stamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    let mut store = app.store.write().await;
    let item = store.record(id, req.decision, &reviewer, Some(stamp))?;
    Ok(Json(item))
}

async fn get_overlay(State(app): State<AppState>, Path(id): Path<u64>) -> ApiResult<ImageOverlay> {
    let store = app.store.read().await;
    let overlay = store.overlay(id).ok_or(CoreError::MissingImage(id))?;
    Ok(Json(overlay.clone()))
}

fn content_type(name: &str) -> &'static str {
    let ext = name.rsplit('.').next().unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "tif" | "tiff" => "image/tiff",
        "bmp" => "image/bmp",
        "webp" => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn get_image(State(app): State<AppState>, Path(id): Path<u64>) -> Result<Response, ApiError> {
    let name = {
        let store = app.store.read().await;
        store.overlay(id).ok_or(CoreError::MissingImage(id))?.file_name.clone()
    };
    let dir = app
        .config
        .images_dir
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no image directory configured"))?;
    // file names come from the queue, but keep them inside the image directory
    if name.is_empty() || name.contains("..") || name.starts_with('/') {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("image {id} has no servable file")));
    }
    let bytes = tokio::fs::read(dir.join(&name))
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, format!("image {id}: {e}")))?;
    Ok(([(header::CONTENT_TYPE, HeaderValue::from_static(content_type(&name)))], bytes).into_response())
}

async fn get_progress(State(app): State<AppState>) -> ApiResult<Progress> {
    let store = app.store.read().await;
    Ok(Json(store.progress(&app.config.costs)))
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.config.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(app: AppState) -> Router {
    let api = Router::new()
        .route("/queue", get(get_queue))
        .route("/items/{id}", get(get_item))
        .route("/items/{id}/decision", post(post_decision))
        .route("/images/{id}", get(get_image))
        .route("/images/{id}/overlay", get(get_overlay))
        .route("/progress", get(get_progress))
        .route_layer(middleware::from_fn_with_state(app.clone(), require_token));
    let mut router = Router::new().nest("/api", api);
    if let Some(ui) = &app.config.ui_dir {
        router = router.fallback_service(ServeDir::new(ui));
    }
    router.with_state(app)
}

/// Serves until `shutdown` resolves. Every acknowledged decision is already on disk.
pub async fn serve(listener: tokio::net::TcpListener, app: AppState, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("review service listening on http://{addr}");
    }
    axum::serve(listener, router(app)).with_graceful_shutdown(shutdown).await
}
