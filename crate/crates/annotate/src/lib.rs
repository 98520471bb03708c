//! HTTP endpoints for labeling sampled retrieved images as noise or
//! informative, plus read-only corpus inspection.
//!
//! Annotation:
//! - `GET  /session/{id}` — session summary
//! - `GET  /session/{id}/next` — first unlabeled item, or `{"status":"complete"}`
//! - `POST /session/{id}/label` — `{"item":{"sid":..,"m":..},"label":"noise"|"informative","annotator":".."}`
//! - `GET  /session/{id}/stats`
//! - `GET  /session/{id}/image/{sid}/{m}` — image bytes
//!
//! Inspection (when queries are loaded):
//! - `GET /inspect/sentences?offset=&limit=`
//! - `GET /inspect/sentence/{sid}`
//! - `GET /inspect/image/{sid}/{m}`

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use mmt_core::annotation::{ItemKey, NextItem, SessionStore};
use mmt_core::evaluator::ImageLabel;
use mmt_core::query_builder::QuerySet;
use mmt_core::retrieval::{image_content_type, ImageRecord};

/// Instruction text shown to annotators.
pub const CLASS_DEFINITIONS: [(&str, &str); 2] = [
    ("informative", "The image can provide visual information of the search query."),
    ("noise", "The image can not provide visual information of the search query."),
];

/// Per-sentence data for the inspection views.
#[derive(Debug, Clone, Default)]
pub struct InspectData {
    /// Raw `queries.jsonl` lines with their parsed form, keyed by sid.
    pub queries: BTreeMap<usize, (String, QuerySet)>,
    pub records: BTreeMap<usize, Vec<ImageRecord>>,
    pub sources: Vec<String>,
}

impl InspectData {
    pub fn load(queries_path: &Path, records: &[ImageRecord], sources: Vec<String>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(queries_path)?;
        let mut queries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let set: QuerySet = serde_json::from_str(line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
            })?;
            queries.insert(set.sid, (line.to_owned(), set));
        }
        let mut by_sid: BTreeMap<usize, Vec<ImageRecord>> = BTreeMap::new();
        for r in records {
            by_sid.entry(r.sid).or_default().push(r.clone());
        }
        for recs in by_sid.values_mut() {
            recs.sort_by_key(|r| r.m);
        }
        Ok(Self {
            queries,
            records: by_sid,
            sources,
        })
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    pub sessions: Arc<HashMap<String, Arc<SessionStore>>>,
    pub inspect: Option<Arc<InspectData>>,
    pub sources: Arc<Vec<String>>,
}

impl AppState {
    pub fn new(sessions: Vec<SessionStore>, sources: Vec<String>) -> Self {
        Self {
            sessions: Arc::new(
                sessions
                    .into_iter()
                    .map(|s| (s.session().id.clone(), Arc::new(s)))
                    .collect(),
            ),
            inspect: None,
            sources: Arc::new(sources),
        }
    }

    pub fn with_inspect(mut self, data: InspectData) -> Self {
        self.inspect = Some(Arc::new(data));
        self
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn not_found(what: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, what.into())
}

fn session(state: &AppState, id: &str) -> ApiResult<Arc<SessionStore>> {
    state
        .sessions
        .get(id)
        .cloned()
        .ok_or_else(|| not_found(format!("unknown session {id}")))
}

async fn image_response(path: &str) -> ApiResult<Response> {
    let bytes = tokio::fs::read(path)
        .await
        .map_err(|e| not_found(format!("image {path}: {e}")))?;
    let ct = image_content_type(&bytes);
    Ok(([(header::CONTENT_TYPE, ct)], bytes).into_response())
}

async fn session_info(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let s = session(&state, &id)?;
    let sess = s.session();
    Ok(Json(json!({
        "id": sess.id,
        "seed": sess.seed,
        "sample_size": sess.sample_size,
        "classes": CLASS_DEFINITIONS.iter().map(|(k, v)| json!({"label": k, "definition": v})).collect::<Vec<_>>(),
        "stats": s.stats(),
    })))
}

async fn next_item(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let s = session(&state, &id)?;
    Ok(Json(match s.next() {
        NextItem::Complete => json!({ "status": "complete", "stats": s.stats() }),
        NextItem::Pending { index, item } => json!({
            "status": "pending",
            "index": index,
            "item": item,
            "query": item.query,
            "source": state.sources.get(item.sid),
            "image_url": format!("/session/{id}/image/{}/{}", item.sid, item.m),
            "stats": s.stats(),
        }),
    }))
}

#[derive(Deserialize)]
struct LabelBody {
    item: ItemKey,
    label: ImageLabel,
    #[serde(default = "anonymous")]
    annotator: String,
}

fn anonymous() -> String {
    "anonymous".to_owned()
}

async fn post_label(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let s = session(&state, &id)?;
    let body: LabelBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("malformed label: {e}")))?;
    // The append and fsync happen off the async executor.
    let store = s.clone();
    let stats = tokio::task::spawn_blocking(move || store.label(body.item, body.label, &body.annotator))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| match e {
            mmt_core::annotation::AnnotationError::UnknownItem { .. } => not_found(e.to_string()),
            other => ApiError(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        })?;
    Ok(Json(json!({ "ok": true, "stats": stats })))
}

async fn stats(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let s = session(&state, &id)?;
    Ok(Json(serde_json::to_value(s.stats()).expect("stats serialize")))
}

async fn session_image(
    State(state): State<AppState>,
    UrlPath((id, sid, m)): UrlPath<(String, usize, usize)>,
) -> ApiResult<Response> {
    let s = session(&state, &id)?;
    let item = s
        .item(ItemKey { sid, m })
        .ok_or_else(|| not_found(format!("item sid={sid} m={m} not in session")))?;
    image_response(&item.path).await
}

fn inspect(state: &AppState) -> ApiResult<Arc<InspectData>> {
    state
        .inspect
        .clone()
        .ok_or_else(|| not_found("inspection data not loaded"))
}

#[derive(Deserialize)]
struct Page {
    #[serde(default)]
    offset: usize,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    50
}

#[derive(Serialize)]
struct SentenceSummary<'a> {
    sid: usize,
    source: Option<&'a str>,
    fallback: bool,
    ok_images: usize,
}

async fn list_sentences(State(state): State<AppState>, Query(page): Query<Page>) -> ApiResult<Json<serde_json::Value>> {
    let data = inspect(&state)?;
    let items: Vec<SentenceSummary> = data
        .queries
        .values()
        .skip(page.offset)
        .take(page.limit)
        .map(|(_, q)| SentenceSummary {
            sid: q.sid,
            source: data.sources.get(q.sid).map(String::as_str),
            fallback: q.fallback,
            ok_images: data.records.get(&q.sid).map_or(0, |r| {
                r.iter()
                    .filter(|r| r.status == mmt_core::retrieval::ImageStatus::Ok)
                    .count()
            }),
        })
        .collect();
    Ok(Json(json!({ "total": data.queries.len(), "offset": page.offset, "items": items })))
}

async fn sentence_detail(State(state): State<AppState>, UrlPath(sid): UrlPath<usize>) -> ApiResult<Json<serde_json::Value>> {
    let data = inspect(&state)?;
    let (line, set) = data
        .queries
        .get(&sid)
        .ok_or_else(|| not_found(format!("unknown sentence {sid}")))?;
    let images: Vec<serde_json::Value> = data
        .records
        .get(&sid)
        .map(|recs| {
            recs.iter()
                .map(|r| {
                    let available = r.path.as_deref().is_some_and(|p| Path::new(p).is_file());
                    json!({
                        "m": r.m,
                        "query": r.query,
                        "status": r.status,
                        "url": r.url,
                        "image_url": available.then(|| format!("/inspect/image/{sid}/{}", r.m)),
                    })
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(Json(json!({
        "sid": sid,
        "source": data.sources.get(sid),
        "ranked": set.ranked,
        "queries": set.queries,
        "fallback": set.fallback,
        "queries_line": line,
        "images": images,
    })))
}

async fn inspect_image(
    State(state): State<AppState>,
    UrlPath((sid, m)): UrlPath<(usize, usize)>,
) -> ApiResult<Response> {
    let data = inspect(&state)?;
    let path = data
        .records
        .get(&sid)
        .and_then(|recs| recs.iter().find(|r| r.m == m))
        .and_then(|r| r.path.clone())
        .ok_or_else(|| not_found(format!("no image for sid={sid} m={m}")))?;
    image_response(&path).await
}

/// The full router; `static_dir`, when given, serves the browser client
/// for every other path.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let app = Router::new()
        .route("/session/{id}", get(session_info))
        .route("/session/{id}/next", get(next_item))
        .route("/session/{id}/label", post(post_label))
        .route("/session/{id}/stats", get(stats))
        .route("/session/{id}/image/{sid}/{m}", get(session_image))
        .route("/inspect/sentences", get(list_sentences))
        .route("/inspect/sentence/{sid}", get(sentence_detail))
        .route("/inspect/image/{sid}/{m}", get(inspect_image))
        .with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: std::net::SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await
}
