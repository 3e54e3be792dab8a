//! HTTP query service.
//!
//! Serves retrieval over an immutable (model, gallery) snapshot that can be
//! swapped atomically at runtime:
//!
//! - `GET /health` → `{status, model_fingerprint, gallery_size}`
//! - `POST /query?k=10` → `{results: [{instance_id, distance, thumbnail_url}]}`;
//!   the body is a multipart form with an image part, JSON `{"image": <base64>}`
//!   or the raw encoded image
//! - `GET /thumbnail/{instance_id}` → the logo file
//! - `POST /admin/reload` with `{checkpoint, gallery, dataset_root}`
//!
//! Errors are `{error: string}` with a 4xx/5xx status.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{FromRequest, Multipart, Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use logonet_core::dataset::load_manifest;
use logonet_core::model::LogoNetModel;
use logonet_core::persistence::{load_checkpoint, load_gallery};
use logonet_core::retrieval::{query_image, round4, Gallery};

/// Default shortlist length when `k` is not given.
pub const DEFAULT_K: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] logonet_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// A coherent model + gallery pair with the logo files behind the gallery.
#[derive(Debug)]
pub struct Snapshot {
    pub model: LogoNetModel,
    pub gallery: Gallery,
    logo_files: HashMap<String, PathBuf>,
    /// Set when the gallery was not built by this model.
    pub warning: Option<String>,
}

impl Snapshot {
    /// Logo files are resolved through `dataset_root/manifest.csv` when it
    /// exists, otherwise as `dataset_root/images/<id>.png`.
    pub fn new(model: LogoNetModel, gallery: Gallery, dataset_root: &Path) -> Self {
        let mut logo_files: HashMap<String, PathBuf> = gallery
            .instance_ids()
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    dataset_root.join("images").join(format!("{id}.png")),
                )
            })
            .collect();
        match load_manifest(dataset_root) {
            Ok(m) => {
                for l in m.logos() {
                    if let Some(p) = logo_files.get_mut(&l.instance_id) {
                        *p = m.logo_path(l);
                    }
                }
            }
            Err(e) => log::warn!("no usable manifest under {}: {e}", dataset_root.display()),
        }
        let warning = gallery.fingerprint_mismatch(&model);
        if let Some(w) = &warning {
            log::warn!("{w}");
        }
        Snapshot {
            model,
            gallery,
            logo_files,
            warning,
        }
    }

    pub fn load(
        checkpoint: &Path,
        gallery: &Path,
        dataset_root: &Path,
    ) -> Result<Self, ServiceError> {
        let model = load_checkpoint(checkpoint)?;
        let gallery = load_gallery(gallery)?;
        Ok(Snapshot::new(model, gallery, dataset_root))
    }

    pub fn logo_file(&self, instance_id: &str) -> Option<&Path> {
        self.logo_files.get(instance_id).map(PathBuf::as_path)
    }
}

/// One line of the request log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub route: String,
    pub status: u16,
    pub warning: Option<String>,
}

#[derive(Debug, Default)]
pub struct ServiceState {
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    log: Mutex<Vec<LogEntry>>,
}

impl ServiceState {
    pub fn new(snapshot: Option<Snapshot>) -> Arc<Self> {
        Arc::new(ServiceState {
            snapshot: RwLock::new(snapshot.map(Arc::new)),
            log: Mutex::new(Vec::new()),
        })
    }

    /// The current snapshot; callers keep it for the whole request.
    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Atomically replaces the snapshot.
    pub fn swap(&self, snapshot: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Some(Arc::new(snapshot));
    }

    pub fn request_log(&self) -> Vec<LogEntry> {
        self.log.lock().expect("log lock").clone()
    }

    fn record(&self, route: &str, status: StatusCode, warning: Option<String>) {
        self.log.lock().expect("log lock").push(LogEntry {
            route: route.to_string(),
            status: status.as_u16(),
            warning,
        });
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn unavailable() -> ApiError {
    ApiError(
        StatusCode::SERVICE_UNAVAILABLE,
        "no model or gallery loaded".into(),
    )
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Health {
    pub status: String,
    pub model_fingerprint: Option<String>,
    pub gallery_size: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Clone)]
pub struct QueryHit {
    pub instance_id: String,
    pub distance: f64,
    pub thumbnail_url: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Clone)]
pub struct QueryResponse {
    pub results: Vec<QueryHit>,
}

#[derive(Debug, Deserialize)]
pub struct QueryParams {
    k: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReloadRequest {
    pub checkpoint: PathBuf,
    pub gallery: PathBuf,
    pub dataset_root: PathBuf,
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/query", post(query))
        .route("/thumbnail/{instance_id}", get(thumbnail))
        .route("/admin/reload", post(reload))
        .with_state(state)
}

fn health_of(snapshot: Option<&Snapshot>) -> Health {
    match snapshot {
        Some(s) => Health {
            status: "ok".into(),
            model_fingerprint: Some(s.model.fingerprint()),
            gallery_size: s.gallery.len(),
        },
        None => Health {
            status: "empty".into(),
            model_fingerprint: None,
            gallery_size: 0,
        },
    }
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<Health> {
    Json(health_of(state.snapshot().as_deref()))
}

/// Extracts the encoded image from any of the accepted payload shapes.
async fn image_payload(headers: &HeaderMap, req: Request) -> Result<Vec<u8>, ApiError> {
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    if content_type.starts_with("multipart/form-data") {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| bad_request(format!("bad multipart body: {e}")))?;
        while let Some(field) = form
            .next_field()
            .await
            .map_err(|e| bad_request(format!("bad multipart body: {e}")))?
        {
            let is_image = field.file_name().is_some()
                || matches!(field.name(), Some("image" | "file" | "sketch"));
            if is_image {
                let bytes = field
                    .bytes()
                    .await
                    .map_err(|e| bad_request(format!("bad multipart body: {e}")))?;
                return Ok(bytes.to_vec());
            }
        }
        return Err(bad_request("multipart body has no image part"));
    }
    let body = axum::body::to_bytes(req.into_body(), 32 << 20)
        .await
        .map_err(|e| bad_request(format!("cannot read body: {e}")))?;
    if content_type.starts_with("application/json") {
        #[derive(Deserialize)]
        struct JsonImage {
            image: String,
        }
        let j: JsonImage = serde_json::from_slice(&body)
            .map_err(|e| bad_request(format!("bad JSON body: {e}")))?;
        // tolerate data URLs as produced by canvas.toDataURL
        let b64 = j.image.split_once(',').map(|(_, b)| b).unwrap_or(&j.image);
        return base64::engine::general_purpose::STANDARD
            .decode(b64.trim())
            .map_err(|e| bad_request(format!("image is not valid base64: {e}")));
    }
    Ok(body.to_vec())
}

async fn query(
    State(state): State<Arc<ServiceState>>,
    Query(params): Query<QueryParams>,
    headers: HeaderMap,
    req: Request,
) -> Response {
    let snapshot = state.snapshot();
    let warning = snapshot.as_ref().and_then(|s| s.warning.clone());
    let result = run_query(snapshot, params, &headers, req).await;
    let response = match result {
        Ok(body) => Json(body).into_response(),
        Err(e) => e.into_response(),
    };
    state.record("/query", response.status(), warning);
    response
}

async fn run_query(
    snapshot: Option<Arc<Snapshot>>,
    params: QueryParams,
    headers: &HeaderMap,
    req: Request,
) -> Result<QueryResponse, ApiError> {
    let snapshot = snapshot.ok_or_else(unavailable)?;
    let g = snapshot.gallery.len();
    let k = match params.k.as_deref() {
        None => DEFAULT_K.min(g),
        Some(raw) => raw
            .trim()
            .parse::<usize>()
            .map_err(|_| bad_request(format!("k must be an integer in 1..={g}, got {raw:?}")))?,
    };
    if k == 0 || k > g {
        return Err(bad_request(format!("k must be in 1..={g}, got {k}")));
    }
    let bytes = image_payload(headers, req).await?;
    if bytes.is_empty() {
        return Err(bad_request("empty image payload"));
    }
    let snap = snapshot.clone();
    let hits =
        tokio::task::spawn_blocking(move || query_image(&snap.model, &snap.gallery, &bytes, k))
            .await
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
            .map_err(|e| match e {
                logonet_core::Error::ImageDecode { .. }
                | logonet_core::Error::InvalidArgument { .. } => bad_request(e.to_string()),
                other => ApiError(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
            })?;
    Ok(QueryResponse {
        results: hits
            .into_iter()
            .map(|(instance_id, d)| QueryHit {
                thumbnail_url: format!("/thumbnail/{instance_id}"),
                instance_id,
                distance: round4(d),
            })
            .collect(),
    })
}

async fn thumbnail(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
) -> Response {
    let Some(snapshot) = state.snapshot() else {
        return unavailable().into_response();
    };
    let Some(path) = snapshot.logo_file(&id).map(Path::to_path_buf) else {
        return ApiError(StatusCode::NOT_FOUND, format!("unknown instance_id {id}"))
            .into_response();
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => {
            let mime = match path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .as_deref()
            {
                Some("jpg" | "jpeg") => "image/jpeg",
                _ => "image/png",
            };
            ([(header::CONTENT_TYPE, mime)], bytes).into_response()
        }
        Err(e) => {
            ApiError(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())).into_response()
        }
    }
}

async fn reload(
    State(state): State<Arc<ServiceState>>,
    body: Result<Json<ReloadRequest>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return bad_request(e.body_text()).into_response(),
    };
    let loaded = tokio::task::spawn_blocking(move || {
        Snapshot::load(&req.checkpoint, &req.gallery, &req.dataset_root)
    })
    .await;
    let response = match loaded {
        Ok(Ok(snapshot)) => {
            let health = health_of(Some(&snapshot));
            state.swap(snapshot);
            log::info!("snapshot reloaded: model {:?}", health.model_fingerprint);
            Json(health).into_response()
        }
        Ok(Err(e)) => bad_request(e.to_string()).into_response(),
        Err(e) => ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    };
    state.record("/admin/reload", response.status(), None);
    response
}

/// Binds `addr` (port 0 picks a free port).
pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ServiceError> {
    Ok(TcpListener::bind(addr).await?)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, state: Arc<ServiceState>) -> Result<(), ServiceError> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
