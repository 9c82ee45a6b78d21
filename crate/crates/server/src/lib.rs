//! HTTP API over a loaded [`Bumper`]: sessions, asks, action listing and
//! background stability evaluations.
//!
//! Sessions live as one JSON file each under `<data_dir>/sessions`; every
//! ask is persisted before the response is sent. Asks to the same session
//! are serialized, asks to different sessions run concurrently.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bumper_core::guidelines::{CheckVariant, Verdict};
use bumper_core::pipeline::{Bumper, BumperAnswer};
use bumper_core::session::{SessionError, SessionStore};
use bumper_core::stability::{self, BundlePaths, EvaluateSettings, ReportSummary};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;
use uuid::Uuid;

/// Evaluations allowed to run at once; further jobs queue.
pub const MAX_CONCURRENT_JOBS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Job {
    pub job_id: Uuid,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<BundlePaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<ReportSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct AppState {
    bumper: Arc<Bumper>,
    store: SessionStore,
    evaluations: PathBuf,
    session_locks: Mutex<HashMap<Uuid, Arc<tokio::sync::Mutex<()>>>>,
    jobs: Arc<Mutex<HashMap<Uuid, Job>>>,
    job_gate: Arc<Semaphore>,
}

impl AppState {
    pub fn new(bumper: Bumper, data_dir: &Path) -> Result<Self, SessionError> {
        Ok(Self {
            bumper: Arc::new(bumper),
            store: SessionStore::open(data_dir.join("sessions"))?,
            evaluations: data_dir.join("evaluations"),
            session_locks: Mutex::new(HashMap::new()),
            jobs: Arc::new(Mutex::new(HashMap::new())),
            job_gate: Arc::new(Semaphore::new(MAX_CONCURRENT_JOBS)),
        })
    }

    fn session_lock(&self, id: Uuid) -> Arc<tokio::sync::Mutex<()>> {
        self.session_locks.lock().unwrap_or_else(|e| e.into_inner()).entry(id).or_default().clone()
    }

    fn set_job(&self, job: Job) {
        self.jobs.lock().unwrap_or_else(|e| e.into_inner()).insert(job.job_id, job);
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(json!({ "error": message }))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::NotFound(id) => ApiError::NotFound(format!("session {id} not found")),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

fn parse_id(raw: &str, what: &str) -> Result<Uuid, ApiError> {
    raw.parse().map_err(|_| ApiError::NotFound(format!("{what} {raw} not found")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/ask", post(ask))
        .route("/actions", get(list_actions))
        .route("/evaluate", post(start_evaluation))
        .route("/evaluate/{job}", get(get_job))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(format!("worker failed: {e}")))
}

async fn create_session(State(state): State<Arc<AppState>>) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let name = state.bumper.config().name.clone();
    let store = state.store.clone();
    let record = blocking(move || store.create(&name)).await??;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": record.id() }))))
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let id = parse_id(&id, "session")?;
    let store = state.store.clone();
    let record = blocking(move || store.load(id)).await??;
    Ok(Json(record).into_response())
}

#[derive(Debug, Deserialize)]
pub struct AskRequest {
    pub query: String,
}

/// The answer plus its headline fields at the top level for clients.
#[derive(Debug, Serialize, Deserialize)]
pub struct AskResponse {
    #[serde(flatten)]
    pub answer: BumperAnswer,
    pub verdict: Option<Verdict>,
    pub score: Option<f64>,
    pub explanation: Option<String>,
}

impl From<BumperAnswer> for AskResponse {
    fn from(answer: BumperAnswer) -> Self {
        Self {
            verdict: answer.verdict(),
            score: answer.score(),
            explanation: answer.outcome.as_ref().and_then(|o| o.explanation.clone()),
            answer,
        }
    }
}

async fn ask(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AskRequest>,
) -> Result<Json<AskResponse>, ApiError> {
    let id = parse_id(&id, "session")?;
    if !state.store.exists(id) {
        return Err(ApiError::NotFound(format!("session {id} not found")));
    }
    if req.query.trim().is_empty() {
        return Err(ApiError::BadRequest("query is empty".into()));
    }
    let lock = state.session_lock(id);
    let _guard = lock.lock().await;
    let (bumper, store) = (state.bumper.clone(), state.store.clone());
    let answer = blocking(move || -> Result<BumperAnswer, SessionError> {
        let mut record = store.load(id)?;
        let answer = bumper.ask(&mut record.thread, &req.query);
        store.save(&record)?;
        Ok(answer)
    })
    .await??;
    Ok(Json(answer.into()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ActionInfo {
    pub name: String,
    pub description: String,
    pub kind: String,
}

async fn list_actions(State(state): State<Arc<AppState>>) -> Json<Vec<ActionInfo>> {
    use bumper_core::actions::ActionKind;
    let actions = state
        .bumper
        .knowledge_base()
        .specs()
        .iter()
        .map(|s| ActionInfo {
            name: s.name.clone(),
            description: s.description.clone(),
            kind: match s.kind {
                ActionKind::TableLookup(_) => "table-lookup",
                ActionKind::Subprocess(_) => "subprocess",
                ActionKind::Retrieval(_) => "retrieval",
            }
            .into(),
        })
        .collect();
    Json(actions)
}

#[derive(Debug, Deserialize)]
pub struct EvaluateRequest {
    pub query: String,
    #[serde(default)]
    pub n_answers: Option<usize>,
    #[serde(default)]
    pub n_checks: Option<usize>,
    #[serde(default)]
    pub variant: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

async fn start_evaluation(
    State(state): State<Arc<AppState>>,
    Json(req): Json<EvaluateRequest>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    if req.query.trim().is_empty() {
        return Err(ApiError::BadRequest("query is empty".into()));
    }
    let mut settings = EvaluateSettings { variant: state.bumper.config().check.variant(), ..Default::default() };
    if let Some(v) = &req.variant {
        settings.variant = v.parse::<CheckVariant>().map_err(ApiError::BadRequest)?;
    }
    settings.n_answers = req.n_answers.unwrap_or(settings.n_answers);
    settings.n_checks = req.n_checks.unwrap_or(settings.n_checks);
    settings.seed = req.seed.unwrap_or(settings.seed);
    if settings.n_answers == 0 || settings.n_checks == 0 {
        return Err(ApiError::BadRequest("n_answers and n_checks must be at least 1".into()));
    }

    let job_id = Uuid::new_v4();
    let job = move |status| Job { job_id, status, paths: None, summary: None, error: None };
    state.set_job(job(JobStatus::Queued));

    let out_dir = state.evaluations.join(job_id.to_string());
    let task_state = state.clone();
    tokio::spawn(async move {
        let _permit = task_state.job_gate.clone().acquire_owned().await;
        task_state.set_job(job(JobStatus::Running));
        let bumper = task_state.bumper.clone();
        let query = req.query;
        let result = tokio::task::spawn_blocking(move || {
            let eval = stability::evaluate(&bumper, &query, &settings)?;
            let paths = stability::write_bundle(&out_dir, &eval)?;
            Ok::<_, stability::StabilityError>((paths, ReportSummary::from_evaluation(&eval)))
        })
        .await;
        let finished = match result {
            Ok(Ok((paths, summary))) => Job { paths: Some(paths), summary: Some(summary), ..job(JobStatus::Done) },
            Ok(Err(e)) => Job { error: Some(e.to_string()), ..job(JobStatus::Failed) },
            Err(e) => Job { error: Some(format!("worker failed: {e}")), ..job(JobStatus::Failed) },
        };
        task_state.set_job(finished);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))))
}

async fn get_job(State(state): State<Arc<AppState>>, UrlPath(job): UrlPath<String>) -> Result<Json<Job>, ApiError> {
    let id = parse_id(&job, "job")?;
    state
        .jobs
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("job {id} not found")))
}
