use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::store::{AnnotationStore, ExportParams, RedundancyRule, StoreError, Submission};

pub type SharedStore = Arc<Mutex<AnnotationStore>>;

#[derive(Debug, Clone, Default)]
pub struct StaticDirs {
    /// Built UI bundle, served at `/`.
    pub ui: Option<PathBuf>,
    /// Image files, served at `/images`.
    pub images: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::UnknownTask(_) => StatusCode::NOT_FOUND,
            StoreError::Duplicate { .. } => StatusCode::CONFLICT,
            StoreError::NotAssigned { .. } | StoreError::EmptyAnnotator => StatusCode::BAD_REQUEST,
            StoreError::Io { .. } | StoreError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn lock(store: &SharedStore) -> Result<MutexGuard<'_, AnnotationStore>, ApiError> {
    store
        .lock()
        .map_err(|_| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "store lock poisoned".into()))
}

async fn next_task(State(store): State<SharedStore>, Query(q): Query<HashMap<String, String>>) -> Result<Response, ApiError> {
    let annotator = q.get("annotator").ok_or_else(|| bad_request("missing `annotator` query parameter"))?;
    let task = lock(&store)?.next_task(annotator)?;
    Ok(match task {
        Some(t) => Json(t).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Serialize)]
struct Ack {
    task_id: String,
    accepted: bool,
}

async fn submit(
    State(store): State<SharedStore>,
    body: Result<Json<Submission>, JsonRejection>,
) -> Result<Json<Ack>, ApiError> {
    let Json(s) = body.map_err(|e| bad_request(e.body_text()))?;
    let r = lock(&store)?.submit(s)?;
    // filter_passed stays server-side: echoing it would reveal the filter slot
    Ok(Json(Ack {
        task_id: r.task_id,
        accepted: true,
    }))
}

async fn progress(State(store): State<SharedStore>) -> Result<Response, ApiError> {
    Ok(Json(lock(&store)?.progress()).into_response())
}

fn export_params(q: &HashMap<String, String>) -> Result<ExportParams, ApiError> {
    let mut p = ExportParams::default();
    if let Some(r) = q.get("rule") {
        p.rule = RedundancyRule::parse(r).ok_or_else(|| bad_request(format!("unknown rule `{r}`")))?;
    }
    if let Some(m) = q.get("min_pass") {
        p.min_filter_pass_rate = m
            .parse()
            .ok()
            .filter(|v: &f64| (0.0..=1.0).contains(v))
            .ok_or_else(|| bad_request(format!("min_pass must be a number in [0, 1], got `{m}`")))?;
    }
    if let Some(f) = q.get("include_failed") {
        p.include_failed = f.parse().map_err(|_| bad_request("include_failed must be true or false"))?;
    }
    Ok(p)
}

async fn export(State(store): State<SharedStore>, Query(q): Query<HashMap<String, String>>) -> Result<Response, ApiError> {
    let params = export_params(&q)?;
    Ok(Json(lock(&store)?.export(&params)).into_response())
}

pub fn router(store: SharedStore, dirs: &StaticDirs) -> Router {
    let mut app = Router::new()
        .route("/api/task", get(next_task))
        .route("/api/decision", post(submit))
        .route("/api/progress", get(progress))
        .route("/api/export", get(export))
        .with_state(store);
    if let Some(images) = &dirs.images {
        app = app.nest_service("/images", ServeDir::new(images));
    }
    if let Some(ui) = &dirs.ui {
        app = app.fallback_service(ServeDir::new(ui));
    }
    app
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
