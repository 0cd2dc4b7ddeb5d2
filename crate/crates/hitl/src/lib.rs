//! Preference-labeling service. Serves exported rollout pairs with the
//! candidate order randomized per request, and appends de-randomized labels to
//! a JSON-lines journal that fully determines the label state.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use caspi_core::labels::{read_journal, read_tasks, LabelError, LabelRecord, LabelStore, TaskContext, TaskRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const PORT_ENV: &str = "CASPI_HITL_PORT";
pub const DEFAULT_PORT: u16 = 8723;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// What an annotator sees: no model seeds, no dialogue id, and candidates in
/// display order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub context: TaskContext,
    pub c1_turns: Vec<String>,
    pub c2_turns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRequest {
    /// Preference for the candidate displayed first.
    pub mu_c1: f64,
    pub annotator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub labeled: usize,
    pub per_annotator: BTreeMap<String, usize>,
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

struct Inner {
    tasks: Vec<TaskRecord>,
    index: HashMap<String, usize>,
    labels: LabelStore,
    /// `(task, annotator)` pairs already served, with whether the display
    /// order was swapped.
    served: HashMap<(usize, String), bool>,
    rng: ChaCha8Rng,
    journal: File,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
}

impl AppState {
    /// Loads the task pool and replays the journal, creating it when absent.
    pub fn load(tasks: &Path, journal: &Path, display_seed: u64) -> Result<Self, ServiceError> {
        let tasks = read_tasks(tasks)?;
        let records = read_journal(journal)?;
        let index: HashMap<String, usize> = tasks.iter().enumerate().map(|(i, t)| (t.task_id.clone(), i)).collect();
        if let Some(r) = records.iter().find(|r| !index.contains_key(&r.task_id)) {
            return Err(LabelError::UnknownTask(r.task_id.clone()).into());
        }
        let labels = LabelStore::replay(&records)?;
        if let Some(parent) = journal.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|source| ServiceError::Io { path: parent.display().to_string(), source })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(journal)
            .map_err(|source| ServiceError::Io { path: journal.display().to_string(), source })?;
        let inner = Inner {
            tasks,
            index,
            labels,
            served: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(display_seed),
            journal: file,
        };
        Ok(Self { inner: Arc::new(Mutex::new(inner)) })
    }

    pub fn progress(&self) -> Progress {
        let g = self.inner.lock().expect("state lock");
        Progress { total: g.tasks.len(), labeled: g.labels.labeled_tasks(), per_annotator: g.labels.per_annotator() }
    }
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

async fn next_task(State(state): State<AppState>, Query(q): Query<NextQuery>) -> Response {
    if q.annotator.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "annotator id is empty");
    }
    let mut g = state.inner.lock().expect("state lock");
    let inner = &mut *g;
    let pick = (0..inner.tasks.len()).find(|&i| {
        !inner.served.contains_key(&(i, q.annotator.clone())) && !inner.labels.contains(&inner.tasks[i].task_id, &q.annotator)
    });
    let Some(i) = pick else { return StatusCode::NO_CONTENT.into_response() };
    let swapped = inner.rng.random_bool(0.5);
    inner.served.insert((i, q.annotator), swapped);
    let t = &inner.tasks[i];
    let (a, b) = if swapped { (&t.c2_turns, &t.c1_turns) } else { (&t.c1_turns, &t.c2_turns) };
    let view = TaskView { task_id: t.task_id.clone(), context: t.context.clone(), c1_turns: a.clone(), c2_turns: b.clone() };
    Json(view).into_response()
}

async fn post_label(State(state): State<AppState>, UrlPath(id): UrlPath<String>, Json(req): Json<LabelRequest>) -> Response {
    let mut g = state.inner.lock().expect("state lock");
    let inner = &mut *g;
    let Some(&i) = inner.index.get(&id) else { return error(StatusCode::NOT_FOUND, format!("unknown task `{id}`")) };
    if !(0.0..=1.0).contains(&req.mu_c1) {
        return error(StatusCode::UNPROCESSABLE_ENTITY, format!("mu_c1 = {} is outside [0, 1]", req.mu_c1));
    }
    if req.annotator.trim().is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "annotator id is empty");
    }
    if inner.labels.contains(&id, &req.annotator) {
        return error(StatusCode::CONFLICT, format!("task `{id}` already labeled by `{}`", req.annotator));
    }
    let swapped = inner.served.get(&(i, req.annotator.clone())).copied().unwrap_or(false);
    let mu = if swapped { 1.0 - req.mu_c1 } else { req.mu_c1 };
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
    let record = LabelRecord { task_id: id, mu_c1: mu, annotator: req.annotator, ts };
    let mut line = serde_json::to_vec(&record).expect("label serializes");
    line.push(b'\n');
    if let Err(e) = inner.journal.write_all(&line).and_then(|_| inner.journal.flush()) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, format!("journal write failed: {e}"));
    }
    inner.labels.insert(&record).expect("checked above");
    (StatusCode::CREATED, Json(record)).into_response()
}

async fn progress(State(state): State<AppState>) -> Json<Progress> {
    Json(state.progress())
}

/// API routes, plus static files from `static_dir` for everything else.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}/label", post(post_label))
        .route("/api/progress", get(progress))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Port from `CASPI_HITL_PORT`, defaulting to 8723.
pub fn port_from_env() -> Result<u16, String> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v.parse().map_err(|_| format!("{PORT_ENV}={v} is not a port number")),
        Err(_) => Ok(DEFAULT_PORT),
    }
}
