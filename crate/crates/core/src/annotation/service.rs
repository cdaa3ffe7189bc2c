//! HTTP front of the annotation store.

use std::collections::BTreeMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{export_dataset, AnnotationStore, LassoSelection};
use crate::corpus::{read_corpus, Report};
use crate::error::{Error, Result};
use crate::pooling::AttentionRecord;
use crate::projection::{read_points, ProjectedPoint};
use crate::tokenizer::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub corpus: PathBuf,
    /// A directory of `<id>.jsonl` point files, or a single such file.
    pub projections: PathBuf,
    pub attention: Option<PathBuf>,
    pub log: PathBuf,
}

pub struct AppState {
    pub reports: BTreeMap<String, Report>,
    pub projections: BTreeMap<String, Vec<ProjectedPoint>>,
    pub attention: BTreeMap<String, AttentionRecord>,
    pub store: RwLock<AnnotationStore>,
}

fn projection_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::NotFound(format!("no projection files in {}", path.display())));
    }
    Ok(files)
}

impl AppState {
    pub fn load(cfg: &ServeConfig) -> Result<Self> {
        let reports = read_corpus(&cfg.corpus)?
            .into_iter()
            .map(|r| (r.report_id.clone(), r))
            .collect();
        let mut projections = BTreeMap::new();
        for file in projection_files(&cfg.projections)? {
            let id = file
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Config(format!("bad projection file name {}", file.display())))?
                .to_string();
            projections.insert(id, read_points(&file)?);
        }
        let attention = match &cfg.attention {
            Some(p) => crate::jsonl::read::<AttentionRecord>(p)?
                .into_iter()
                .map(|r| (r.report_id.clone(), r))
                .collect(),
            None => BTreeMap::new(),
        };
        Ok(Self {
            reports,
            projections,
            attention,
            store: RwLock::new(AnnotationStore::open(&cfg.log)?),
        })
    }
}

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Config(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointView {
    pub report_id: String,
    pub x: f64,
    pub y: f64,
    pub predicted_prob: Option<f64>,
    pub active_label: Option<String>,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let events = state.store.read().expect("store lock").events().len();
    Json(json!({
        "status": "ok",
        "reports": state.reports.len(),
        "projections": state.projections.keys().collect::<Vec<_>>(),
        "events": events,
    }))
}

fn projection<'a>(state: &'a AppState, id: &str) -> Result<&'a [ProjectedPoint]> {
    state
        .projections
        .get(id)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::NotFound(format!("projection {id}")))
}

async fn points(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Vec<PointView>>> {
    let pts = projection(&state, &id)?;
    let store = state.store.read().expect("store lock");
    Ok(Json(
        pts.iter()
            .map(|p| {
                let labels = store.state().active_labels(&p.report_id);
                PointView {
                    report_id: p.report_id.clone(),
                    x: p.x,
                    y: p.y,
                    predicted_prob: p.predicted_prob,
                    active_label: (!labels.is_empty()).then(|| labels.join(";")),
                }
            })
            .collect(),
    ))
}

async fn report(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let r = state
        .reports
        .get(&id)
        .ok_or_else(|| Error::NotFound(format!("report {id}")))?;
    let (tokens, weights) = match state.attention.get(&id) {
        Some(a) => (a.tokens.clone(), Some(a.alphas.clone())),
        None => (tokenize(&r.text), None),
    };
    Ok(Json(json!({
        "report_id": r.report_id,
        "text": r.text,
        "tokens": tokens,
        "attention_weights": weights,
    })))
}

async fn lasso(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(selection): Json<LassoSelection>,
) -> ApiResult<Json<serde_json::Value>> {
    let pts = projection(&state, &id)?;
    let mut store = state.store.write().expect("store lock");
    let created = store.apply_lasso(&id, pts, selection)?;
    let selection_id = store.events().last().map(|e| e.selection_id.clone());
    Ok(Json(json!({
        "selection_id": selection_id,
        "assignment_count": created.len(),
        "report_ids": created.iter().map(|a| &a.report_id).collect::<Vec<_>>(),
    })))
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    label: Option<String>,
}

async fn export(State(state): State<Arc<AppState>>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let store = state.store.read().expect("store lock");
    let out = export_dataset(&state.reports, store.state(), q.label.as_deref())?;
    let mut resp = out.records.into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/x-ndjson"));
    headers.insert("x-export-count", HeaderValue::from(out.count));
    if let Some(w) = out.warning {
        if let Ok(v) = HeaderValue::from_str(&w) {
            headers.insert("x-export-warning", v);
        }
    }
    Ok(resp)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/projections/{id}/points", get(points))
        .route("/projections/{id}/lasso", post(lasso))
        .route("/reports/{id}", get(report))
        .route("/export", get(export))
        .with_state(state)
}

/// Loads artifacts, binds, and serves until `shutdown` resolves. `on_bind`
/// receives the bound address (useful with port 0).
pub async fn serve(
    cfg: ServeConfig,
    on_bind: impl FnOnce(SocketAddr),
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<()> {
    let state = Arc::new(AppState::load(&cfg)?);
    let addr = format!("{}:{}", cfg.host, cfg.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| Error::io(PathBuf::from(&addr), e))?;
    let local = listener.local_addr().map_err(|e| Error::io(PathBuf::from(&addr), e))?;
    tracing::info!(%local, "annotation service listening");
    on_bind(local);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| Error::io(PathBuf::from(&addr), e))
}
