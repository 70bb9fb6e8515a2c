//! HTTP service for reviewing detector proposals and exporting the reviewed
//! points as a classifier training set.
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/images` | |
//! | GET | `/images/{id}` | (PNG of the preprocessed image) |
//! | GET | `/images/{id}/detections` | |
//! | POST | `/images/{id}/propose` | `{threshold?, use_model?}` |
//! | POST | `/images/{id}/detections` | `{x, y, label}` |
//! | PATCH | `/images/{id}/detections/{did}` | `{label}` |
//! | DELETE | `/images/{id}/detections/{did}` | |
//! | POST | `/images/{id}/status` | `{status}` |
//! | POST | `/images/{id}/mine` | `{t_low, count, seed?}` |
//! | POST | `/export` | `{out_dir}` |
//!
//! Errors are JSON `{"error": kind, "detail": message}` with 404 for unknown
//! ids, 422 for invalid input and 409 when an export has nothing to export.

pub mod error;
pub mod project;

use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::rejection::{JsonRejection, PathRejection};
use axum::extract::{FromRequest, FromRequestParts, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, patch, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use tmcnn::classifier::Label;
use tmcnn::matching::{CorrelationMap, NccEngine};
use tower_http::cors::CorsLayer;

pub use error::ServiceError;
pub use project::{Project, ProjectConfig, Status};

type Result<T> = std::result::Result<T, ServiceError>;

/// JSON body whose rejections come back as a JSON error.
#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ServiceError))]
pub struct Json<T>(pub T);

impl<T: Serialize> IntoResponse for Json<T> {
    fn into_response(self) -> axum::response::Response {
        axum::Json(self.0).into_response()
    }
}

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Path), rejection(ServiceError))]
pub struct Path<T>(pub T);

impl From<JsonRejection> for ServiceError {
    fn from(r: JsonRejection) -> Self {
        ServiceError::Invalid(r.body_text())
    }
}

impl From<PathRejection> for ServiceError {
    fn from(r: PathRejection) -> Self {
        ServiceError::Invalid(r.body_text())
    }
}

#[derive(Clone)]
pub struct AppState {
    project: Arc<Mutex<Project>>,
}

impl AppState {
    pub fn new(project: Project) -> Self {
        Self {
            project: Arc::new(Mutex::new(project)),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Project> {
        // A panic mid-request leaves files consistent (writes are atomic), so
        // the poisoned state is still usable.
        self.project.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Runs `f` on the blocking pool with the project locked.
    async fn with<T: Send + 'static>(&self, f: impl FnOnce(&mut Project) -> Result<T> + Send + 'static) -> Result<T> {
        let state = self.clone();
        tokio::task::spawn_blocking(move || f(&mut state.lock()))
            .await
            .map_err(|e| ServiceError::Task(e.to_string()))?
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/images", get(list_images))
        .route("/images/{id}", get(image_png))
        .route("/images/{id}/detections", get(get_detections).post(add_detection))
        .route("/images/{id}/detections/{did}", patch(relabel).delete(delete_detection))
        .route("/images/{id}/propose", post(propose))
        .route("/images/{id}/status", post(set_status))
        .route("/images/{id}/mine", post(mine))
        .route("/export", post(export))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(project: Project, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(project))).await
}

async fn list_images(State(s): State<AppState>) -> Json<Vec<project::ImageRecord>> {
    Json(s.lock().records().to_vec())
}

async fn image_png(State(s): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse> {
    let png = s.with(move |p| Ok(p.image(&id)?.encode_png()?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

async fn get_detections(State(s): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse> {
    Ok(Json(s.with(move |p| p.detections(&id)).await?))
}

/// Correlation map of an image, computed once and cached. The project lock
/// is not held during the correlation itself.
async fn correlation(s: &AppState, id: &str) -> Result<Arc<CorrelationMap>> {
    let key = id.to_string();
    let (cached, img, bank) = s
        .with(move |p| {
            let img = p.image(&key)?;
            Ok((p.cached_map(&key), img, p.config().bank.clone()))
        })
        .await?;
    if let Some(map) = cached {
        return Ok(map);
    }
    let map = tokio::task::spawn_blocking(move || -> Result<CorrelationMap> {
        Ok(NccEngine::new(&img)?.correlate_bank(&bank)?)
    })
    .await
    .map_err(|e| ServiceError::Task(e.to_string()))??;
    let map = Arc::new(map);
    s.lock().store_map(id, map.clone());
    Ok(map)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposeRequest {
    pub threshold: Option<f64>,
    #[serde(default)]
    pub use_model: bool,
}

async fn propose(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ProposeRequest>,
) -> Result<impl IntoResponse> {
    s.with({
        let id = id.clone();
        move |p| p.record(&id).map(|_| ())
    })
    .await?;
    let map = correlation(&s, &id).await?;
    let set = s
        .with(move |p| {
            let t = req.threshold.unwrap_or(p.config().default_threshold);
            p.apply_proposal(&id, &map, t, req.use_model)
        })
        .await?;
    Ok(Json(set))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddRequest {
    pub x: usize,
    pub y: usize,
    pub label: Label,
}

async fn add_detection(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<AddRequest>,
) -> Result<impl IntoResponse> {
    let d = s.with(move |p| p.add(&id, req.x, req.y, req.label)).await?;
    Ok((StatusCode::CREATED, Json(d)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelabelRequest {
    pub label: Label,
}

async fn relabel(
    State(s): State<AppState>,
    Path((id, did)): Path<(String, u64)>,
    Json(req): Json<RelabelRequest>,
) -> Result<impl IntoResponse> {
    Ok(Json(s.with(move |p| p.relabel(&id, did, req.label)).await?))
}

async fn delete_detection(State(s): State<AppState>, Path((id, did)): Path<(String, u64)>) -> Result<impl IntoResponse> {
    Ok(match s.with(move |p| p.delete(&id, did)).await? {
        Some(kept) => Json(kept).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusRequest {
    pub status: Status,
}

async fn set_status(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<StatusRequest>,
) -> Result<impl IntoResponse> {
    Ok(Json(s.with(move |p| p.set_status(&id, req.status)).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MineRequest {
    pub t_low: f64,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

async fn mine(State(s): State<AppState>, Path(id): Path<String>, Json(req): Json<MineRequest>) -> Result<impl IntoResponse> {
    s.with({
        let id = id.clone();
        move |p| p.record(&id).map(|_| ())
    })
    .await?;
    let map = correlation(&s, &id).await?;
    let mined = s.with(move |p| p.mine(&id, &map, req.t_low, req.count, req.seed)).await?;
    Ok(Json(mined))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRequest {
    pub out_dir: PathBuf,
}

/// Export targets stay inside the project directory.
fn export_dir(out_dir: &FsPath) -> Result<PathBuf> {
    let inside = !out_dir.as_os_str().is_empty()
        && out_dir.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if !inside {
        return Err(ServiceError::Invalid(format!(
            "out_dir {} must be a relative path inside the project",
            out_dir.display()
        )));
    }
    Ok(out_dir.to_path_buf())
}

async fn export(State(s): State<AppState>, Json(req): Json<ExportRequest>) -> Result<impl IntoResponse> {
    let dir = export_dir(&req.out_dir)?;
    Ok(Json(s.with(move |p| p.export(&dir)).await?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_dir_rejects_escapes() {
        assert!(export_dir(FsPath::new("out/set1")).is_ok());
        assert!(export_dir(FsPath::new("../elsewhere")).is_err());
        assert!(export_dir(FsPath::new("/tmp/x")).is_err());
        assert!(export_dir(FsPath::new("")).is_err());
    }

    #[test]
    fn error_statuses() {
        assert_eq!(ServiceError::NotFound("x".into()).status(), StatusCode::NOT_FOUND);
        assert_eq!(ServiceError::Invalid("x".into()).status(), StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(ServiceError::Precondition("x".into()).status(), StatusCode::CONFLICT);
        assert_eq!(
            ServiceError::Core(tmcnn::Error::Argument("x".into())).status(),
            StatusCode::UNPROCESSABLE_ENTITY
        );
    }
}
