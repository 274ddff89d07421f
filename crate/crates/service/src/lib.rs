//! HTTP facade over fork-and-intervene sessions.
//!
//! Sessions live under `<root>/sessions/<id>/` and survive restarts; jobs for
//! the long steps (joint phase, finalize) are kept in memory only.

pub mod problem;
pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use matchcut_core::backbone::Concurrency;
use matchcut_core::forksampler::ForkConfig;
use matchcut_core::intervene::InterventionSpec;
use matchcut_core::io::encode_frame_png;
use matchcut_core::metrics::Evaluator;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub use problem::{parse_json, Problem};
pub use session::{Phase, PreviewInfo, Session, SessionRecord, SessionState};
use session::Work;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Joint,
    Finalize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub session_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    /// Session state after success.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<SessionState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<Problem>,
}

type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    root: PathBuf,
    evaluator: Arc<Evaluator>,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    jobs: Mutex<HashMap<String, Job>>,
    /// Held around model calls of backbones that cannot run concurrently.
    serial: Arc<Mutex<()>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

impl AppState {
    /// Opens `root`, reloading every readable session found there.
    pub fn open(root: &Path, evaluator: Evaluator) -> matchcut_core::Result<Arc<Self>> {
        let dir = root.join("sessions");
        std::fs::create_dir_all(&dir)?;
        let mut sessions = HashMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            match Session::open(&path) {
                Ok(s) => {
                    sessions.insert(s.id().to_string(), Arc::new(tokio::sync::Mutex::new(s)));
                }
                Err(e) => tracing::warn!("skipping session {}: {e}", path.display()),
            }
        }
        Ok(Arc::new(Self {
            root: root.to_path_buf(),
            evaluator: Arc::new(evaluator),
            sessions: Mutex::new(sessions),
            jobs: Mutex::new(HashMap::new()),
            serial: Arc::new(Mutex::new(())),
        }))
    }

    fn session(&self, id: &str) -> Result<SessionHandle, Problem> {
        lock(&self.sessions).get(id).cloned().ok_or_else(|| Problem::not_found(format!("no session {id}")))
    }

    fn set_job(&self, job: Job) {
        lock(&self.jobs).insert(job.id.clone(), job);
    }

    fn job(&self, id: &str) -> Option<Job> {
        lock(&self.jobs).get(id).cloned()
    }
}

/// Runs `f` off the async runtime, serialized when the backbone requires it.
async fn blocking<T: Send + 'static>(
    serial: Option<Arc<Mutex<()>>>,
    f: impl FnOnce() -> matchcut_core::Result<T> + Send + 'static,
) -> Result<T, Problem> {
    tokio::task::spawn_blocking(move || {
        let _guard = serial.as_ref().map(|m| lock(m));
        f()
    })
    .await
    .map_err(|e| Problem::internal(e.to_string()))?
    .map_err(Problem::from)
}

fn serial_for(app: &AppState, s: &Session) -> Option<Arc<Mutex<()>>> {
    (s.engine.model.concurrency() == Concurrency::Serialized).then(|| app.serial.clone())
}

pub fn router(app: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let r = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/joint", post(run_joint))
        .route("/sessions/{id}/preview", get(get_preview))
        .route("/sessions/{id}/intervene", post(intervene))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/sessions/{id}/artifacts/{name}", get(get_artifact))
        .route("/jobs/{id}", get(get_job))
        .with_state(app);
    match static_dir {
        Some(dir) => r.fallback_service(ServeDir::new(dir)),
        None => r,
    }
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, root: &Path, static_dir: Option<&Path>) -> std::io::Result<()> {
    let app = AppState::open(root, Evaluator::toy().map_err(std::io::Error::other)?).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app, static_dir)).await
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, Problem> {
    let config: ForkConfig = parse_json(&body)?;
    let id = new_id();
    let dir = app.root.join("sessions").join(&id);
    let session = blocking(None, {
        let id = id.clone();
        move || Session::create(id, dir, config)
    })
    .await?;
    let state = session.state();
    lock(&app.sessions).insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, [(header::LOCATION, format!("/sessions/{id}"))], Json(state)).into_response())
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionState>, Problem> {
    Ok(Json(app.session(&id)?.lock().await.state()))
}

#[derive(Debug, Default, Deserialize)]
pub struct WaitQuery {
    /// Block until the job finishes instead of answering 202.
    #[serde(default)]
    pub wait: bool,
}

async fn run_joint(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Query(q): Query<WaitQuery>) -> Result<Response, Problem> {
    start_job(app, id, JobKind::Joint, q.wait).await
}

async fn finalize(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Query(q): Query<WaitQuery>) -> Result<Response, Problem> {
    start_job(app, id, JobKind::Finalize, q.wait).await
}

fn check_idle(s: &Session) -> Result<(), Problem> {
    match &s.running_job {
        Some(j) => Err(Problem::conflict(format!("job {j} is still running for this session"))),
        None => Ok(()),
    }
}

async fn start_job(app: Arc<AppState>, id: String, kind: JobKind, wait: bool) -> Result<Response, Problem> {
    let handle = app.session(&id)?;
    let job_id = new_id();
    let (work, serial) = {
        let mut s = handle.lock().await;
        check_idle(&s)?;
        let ok = match kind {
            JobKind::Joint => s.phase() == Phase::Created,
            JobKind::Finalize => s.phase().at_fork(),
        };
        if !ok {
            return Err(Problem::conflict(format!("cannot run {kind:?} in phase {:?}", s.phase())));
        }
        s.running_job = Some(job_id.clone());
        (Work::of(&s), serial_for(&app, &s))
    };
    let job = Job { id: job_id.clone(), session_id: id, kind, status: JobStatus::Running, result: None, error: None };
    app.set_job(job.clone());

    let task = tokio::spawn({
        let app = app.clone();
        async move {
            let outcome = match kind {
                JobKind::Joint => blocking(serial, move || work.joint()).await.map(Some),
                JobKind::Finalize => {
                    let ev = app.evaluator.clone();
                    blocking(serial, move || work.finalize(&ev)).await.map(|()| None)
                }
            };
            let mut s = handle.lock().await;
            s.running_job = None;
            let outcome = outcome.and_then(|joint| {
                match joint {
                    Some((trace, staged)) => {
                        s.trace = Some(trace);
                        s.staged = Some(staged);
                        s.record.phase = Phase::JointDone;
                    }
                    None => s.record.phase = Phase::Finished,
                }
                s.persist().map_err(Problem::from)
            });
            let done = match outcome {
                Ok(()) => Job { status: JobStatus::Succeeded, result: Some(s.state()), ..job },
                Err(p) => Job { status: JobStatus::Failed, error: Some(p), ..job },
            };
            app.set_job(done);
        }
    });

    if wait {
        task.await.map_err(|e| Problem::internal(e.to_string()))?;
        let job = app.job(&job_id).ok_or_else(|| Problem::internal("job vanished"))?;
        return match job.error {
            Some(p) => Err(p),
            None => Ok(Json(job).into_response()),
        };
    }
    let job = app.job(&job_id).ok_or_else(|| Problem::internal("job vanished"))?;
    Ok((StatusCode::ACCEPTED, [(header::LOCATION, format!("/jobs/{job_id}"))], Json(job)).into_response())
}

async fn get_job(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Job>, Problem> {
    app.job(&id).map(Json).ok_or_else(|| Problem::not_found(format!("no job {id}")))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreviewBranch {
    #[default]
    A,
    B,
}

#[derive(Debug, Default, Deserialize)]
pub struct PreviewQuery {
    #[serde(default)]
    pub branch: PreviewBranch,
    /// Frame index; without it the preview metadata is returned.
    pub frame: Option<usize>,
}

async fn get_preview(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Query(q): Query<PreviewQuery>) -> Result<Response, Problem> {
    let handle = app.session(&id)?;
    let s = handle.lock().await;
    let (Some(info), Some(staged)) = (s.preview(), s.staged.as_ref()) else {
        return Err(Problem::conflict(format!("no preview in phase {:?}", s.phase())));
    };
    let Some(frame) = q.frame else {
        return Ok(Json(info).into_response());
    };
    if frame >= info.frames {
        return Err(Problem::invalid(Some("frame".into()), format!("frame {frame} out of range (0..{})", info.frames)));
    }
    let video = match q.branch {
        PreviewBranch::A => &staged.preview_a,
        PreviewBranch::B => &staged.preview_b,
    };
    let png = encode_frame_png(&video.clamp01(), frame)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn intervene(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Json<PreviewInfo>, Problem> {
    let handle = app.session(&id)?;
    let spec: InterventionSpec = parse_json(&body)?;
    let mut s = handle.lock().await;
    check_idle(&s)?;
    if !s.phase().at_fork() {
        return Err(Problem::conflict(format!("cannot intervene in phase {:?}", s.phase())));
    }
    let work = Work::of(&s);
    let staged = blocking(serial_for(&app, &s), {
        let spec = spec.clone();
        move || work.intervene(&spec)
    })
    .await?;
    s.staged = Some(staged);
    s.record.interventions.push(spec);
    s.record.phase = Phase::Intervened;
    s.persist()?;
    s.preview().map(Json).ok_or_else(|| Problem::internal("preview missing after intervention"))
}

async fn get_artifact(State(app): State<Arc<AppState>>, UrlPath((id, name)): UrlPath<(String, String)>) -> Result<Response, Problem> {
    let handle = app.session(&id)?;
    let s = handle.lock().await;
    let Some(path) = s.artifact_path(&name) else {
        return Err(Problem::not_found(format!("no artifact named {name}")));
    };
    if s.phase() != Phase::Finished {
        return Err(Problem::conflict(format!("artifacts are available once finished; phase is {:?}", s.phase())));
    }
    let bytes = tokio::fs::read(&path).await.map_err(|e| Problem::internal(e.to_string()))?;
    let kind = if name == "report" { "application/json" } else { "image/png" };
    Ok(([(header::CONTENT_TYPE, kind)], bytes).into_response())
}
