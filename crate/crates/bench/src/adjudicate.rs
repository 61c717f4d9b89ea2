//! Local HTTP service for three-annotator labeling.
//!
//! State is a [`TaskBoard`] rebuilt from an append-only JSONL event log.
//! Mutations run one at a time under a write lock and are logged before
//! they become visible; reads share the lock.
//!
//! | method | path | body / query |
//! |---|---|---|
//! | GET | `/tasks/next?annotator=A` | 200 task or 204 when none left |
//! | POST | `/tasks/{id}/label` | `{"annotator": "A", "label": "ABC1234"}` |
//! | GET | `/tasks?status=needs_review` | also `pending`, `resolved` |
//! | POST | `/tasks/{id}/resolve` | `{"reviewer": "R", "label": "ABC1234"}` |
//! | GET | `/export` | manifest JSONL, or 409 listing unresolved tasks |
//! | GET | `/images/{path}` | image files named by the manifest |

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use plate_core::adjudicate::{Event, TaskBoard, TaskStatus};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::mime_for_path;
use crate::manifest::{load_manifest, manifest_dir, DatasetManifest};

pub struct Service {
    board: RwLock<TaskBoard>,
    log: Mutex<File>,
    manifest: DatasetManifest,
    image_root: PathBuf,
    image_paths: HashSet<String>,
}

/// Events of the log. A final line cut short by a crash is dropped and
/// the file truncated to its intact prefix; any other bad line is an error.
fn read_events(path: &Path) -> Result<Vec<Event>, String> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(format!("{}: {e}", path.display())),
    };
    let mut events = Vec::new();
    let mut offset = 0;
    for (i, line) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
        let complete = line.ends_with(b"\n");
        let text = String::from_utf8_lossy(line);
        if !text.trim().is_empty() {
            match serde_json::from_str(&text) {
                Ok(event) => events.push(event),
                Err(_) if !complete => {
                    log::warn!("{}: dropping truncated final event", path.display());
                    let file = OpenOptions::new().write(true).open(path).map_err(|e| format!("{}: {e}", path.display()))?;
                    file.set_len(offset as u64).map_err(|e| format!("{}: {e}", path.display()))?;
                    break;
                }
                Err(e) => return Err(format!("{}:{}: {e}", path.display(), i + 1)),
            }
        }
        offset += line.len();
    }
    Ok(events)
}

fn append_events(file: &mut File, events: &[Event]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for e in events {
        serde_json::to_writer(&mut buf, e).map_err(std::io::Error::other)?;
        buf.push(b'\n');
    }
    file.write_all(&buf)?;
    file.sync_data()
}

impl Service {
    /// Replays `events_path` (if present) and adds a task for every
    /// manifest record not yet on the board.
    pub fn open(manifest_path: &Path, events_path: &Path) -> Result<Self, String> {
        let manifest = load_manifest(manifest_path).map_err(|e| e.to_string())?;
        let events = read_events(events_path)?;
        let mut board = TaskBoard::replay(&events).map_err(|e| format!("{}: {e}", events_path.display()))?;
        board
            .audit()
            .map_err(|id| format!("{}: task {id:?} fails audit replay", events_path.display()))?;
        for t in board.tasks() {
            if manifest.get(&t.id).is_none() {
                return Err(format!("event log has task {:?} which is not in the manifest", t.id));
            }
        }
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(events_path)
            .map_err(|e| format!("{}: {e}", events_path.display()))?;
        let mut added = Vec::new();
        for r in &manifest.records {
            if board.get(&r.id).is_none() {
                added.extend(board.add_task(&r.id, &r.path).map_err(|e| e.to_string())?);
            }
        }
        append_events(&mut log, &added).map_err(|e| format!("{}: {e}", events_path.display()))?;
        let image_paths = manifest.records.iter().map(|r| r.path.clone()).collect();
        Ok(Self {
            board: RwLock::new(board),
            log: Mutex::new(log),
            image_root: manifest_dir(manifest_path),
            manifest,
            image_paths,
        })
    }

    pub fn board(&self) -> TaskBoard {
        self.board.read().unwrap().clone()
    }

    fn mutate(
        &self,
        f: impl FnOnce(&mut TaskBoard) -> Result<Vec<Event>, plate_core::Error>,
    ) -> Result<TaskBoard, ApiError> {
        let mut board = self.board.write().unwrap();
        let backup = board.clone();
        let events = match f(&mut board) {
            Ok(e) => e,
            Err(e) => {
                *board = backup;
                return Err(e.into());
            }
        };
        if let Err(e) = append_events(&mut self.log.lock().unwrap(), &events) {
            *board = backup;
            return Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("event log: {e}")));
        }
        Ok(board.clone())
    }
}

struct ApiError(StatusCode, String);

impl From<plate_core::Error> for ApiError {
    fn from(e: plate_core::Error) -> Self {
        use plate_core::Error as E;
        let status = match e {
            E::UnknownTask(_) => StatusCode::NOT_FOUND,
            E::DuplicateSubmission { .. } | E::WrongStatus { .. } | E::DuplicateTask(_) => StatusCode::CONFLICT,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: &str) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.to_string())
}

/// Typed labels may use any case and spaces, nothing else.
fn check_typed_label(raw: &str) -> Result<(), ApiError> {
    match raw.chars().find(|c| !c.is_ascii_alphanumeric() && *c != ' ') {
        Some(c) => Err(bad_request(&format!("label may only contain A-Z, 0-9 and spaces, found {c:?}"))),
        None => Ok(()),
    }
}

fn image_url(path: &str) -> String {
    format!("/images/{path}")
}

/// What an annotator sees: never anyone else's label.
#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TaskView {
    pub id: String,
    pub image_url: String,
    pub status: TaskStatus,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SubmissionView {
    pub annotator: String,
    pub label: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ReviewView {
    pub id: String,
    pub image_url: String,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub submissions: Vec<SubmissionView>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conflict_positions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub review_override: bool,
    pub submission_count: usize,
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

#[derive(Deserialize)]
struct ListQuery {
    status: Option<String>,
}

#[derive(Deserialize)]
struct LabelBody {
    annotator: String,
    label: String,
}

#[derive(Deserialize)]
struct ResolveBody {
    reviewer: String,
    label: String,
}

type Shared = Arc<Service>;

async fn next_task(State(svc): State<Shared>, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    let annotator = q.annotator.unwrap_or_default();
    if annotator.trim().is_empty() {
        return Err(bad_request("annotator is required"));
    }
    let board = svc.board.read().unwrap();
    Ok(match board.next_task(&annotator) {
        Some(t) => Json(TaskView {
            id: t.id.clone(),
            image_url: image_url(&t.image_path),
            status: t.status,
        })
        .into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit_label(
    State(svc): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<LabelBody>,
) -> Result<Json<TaskView>, ApiError> {
    if body.annotator.trim().is_empty() {
        return Err(bad_request("annotator is required"));
    }
    check_typed_label(&body.label)?;
    let board = svc.mutate(|b| b.submit(&id, &body.annotator, &body.label))?;
    let t = board.get(&id).expect("task just labeled");
    Ok(Json(TaskView {
        id: t.id.clone(),
        image_url: image_url(&t.image_path),
        status: t.status,
    }))
}

async fn list_tasks(State(svc): State<Shared>, Query(q): Query<ListQuery>) -> Result<Json<Vec<ReviewView>>, ApiError> {
    let status = match q.status.as_deref().unwrap_or("needs_review") {
        "pending" => TaskStatus::Pending,
        "needs_review" => TaskStatus::NeedsReview,
        "resolved" => TaskStatus::Resolved,
        other => return Err(bad_request(&format!("unknown status {other:?}"))),
    };
    let board = svc.board.read().unwrap();
    let views = board
        .with_status(status)
        .map(|t| ReviewView {
            id: t.id.clone(),
            image_url: image_url(&t.image_path),
            status: t.status,
            // labels of pending tasks stay hidden
            submissions: if status == TaskStatus::Pending {
                Vec::new()
            } else {
                t.submissions
                    .iter()
                    .map(|s| SubmissionView {
                        annotator: s.annotator.clone(),
                        label: s.label.text(),
                    })
                    .collect()
            },
            conflict_positions: t.vote.as_ref().map(|v| v.conflict_positions.clone()).unwrap_or_default(),
            label: t.resolved_label.as_ref().map(|l| l.text()),
            review_override: t.review.is_some(),
            submission_count: t.submissions.len(),
        })
        .collect();
    Ok(Json(views))
}

async fn resolve_task(
    State(svc): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<ResolveBody>,
) -> Result<Json<ReviewView>, ApiError> {
    if body.reviewer.trim().is_empty() {
        return Err(bad_request("reviewer is required"));
    }
    check_typed_label(&body.label)?;
    let board = svc.mutate(|b| b.resolve(&id, &body.label, &body.reviewer))?;
    let t = board.get(&id).expect("task just resolved");
    Ok(Json(ReviewView {
        id: t.id.clone(),
        image_url: image_url(&t.image_path),
        status: t.status,
        submissions: Vec::new(),
        conflict_positions: Vec::new(),
        label: t.resolved_label.as_ref().map(|l| l.text()),
        review_override: t.review.is_some(),
        submission_count: t.submissions.len(),
    }))
}

/// Manifest with adjudicated labels, or the ids still unresolved.
pub fn export_manifest(svc: &Service) -> Result<DatasetManifest, Vec<String>> {
    let rows = svc.board.read().unwrap().export()?;
    let mut out = DatasetManifest::new(svc.manifest.name.clone());
    out.seed = svc.manifest.seed;
    for (id, _, label) in rows {
        let mut rec = svc.manifest.get(&id).expect("tasks come from the manifest").clone();
        rec.label = Some(label);
        out.records.push(rec);
    }
    Ok(out)
}

async fn export(State(svc): State<Shared>) -> Response {
    match export_manifest(&svc) {
        Ok(m) => {
            let dir = match tempfile::tempdir() {
                Ok(d) => d,
                Err(e) => return ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
            };
            let path = dir.path().join("manifest.jsonl");
            let body = crate::manifest::save_manifest(&m, &path)
                .map_err(|e| e.to_string())
                .and_then(|_| std::fs::read(&path).map_err(|e| e.to_string()));
            match body {
                Ok(bytes) => ([(header::CONTENT_TYPE, "application/x-ndjson")], bytes).into_response(),
                Err(e) => ApiError(StatusCode::INTERNAL_SERVER_ERROR, e).into_response(),
            }
        }
        Err(unresolved) => (
            StatusCode::CONFLICT,
            Json(json!({ "error": "unresolved tasks block export", "unresolved": unresolved })),
        )
            .into_response(),
    }
}

async fn image(State(svc): State<Shared>, UrlPath(path): UrlPath<String>) -> Response {
    // only files the manifest names are served
    if !svc.image_paths.contains(&path) {
        return StatusCode::NOT_FOUND.into_response();
    }
    let full = svc.image_root.join(&path);
    match tokio::fs::read(&full).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, mime_for_path(&full))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/tasks/next", get(next_task))
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}/label", post(submit_label))
        .route("/tasks/{id}/resolve", post(resolve_task))
        .route("/export", get(export))
        .route("/images/{*path}", get(image))
        .with_state(svc)
}

/// Serves until Ctrl-C.
pub async fn serve(svc: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("adjudication service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
