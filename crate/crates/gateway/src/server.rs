//! HTTP annotation service.
//!
//! Each experiment is owned by one actor task. Label submissions are
//! serialized through its command queue, journaled before they are
//! acknowledged, and training runs on a blocking thread while reads are
//! served from the latest published snapshot.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Body;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

use activest::cloud::{write_cloud, CloudFormat};
use activest::ensemble::{write_summary, EnsembleSummary};
use activest::labels::{read_journal, Annotation, AnnotationSource, Journal};
use activest::pipeline::{checkpoint, metrics_csv, resume, ExperimentConfig, ExperimentState, PreparedDataset, Status};
use activest::sampler::QuerySet;
use activest::Error;

pub const DATA_DIR_ENV: &str = "ACTIVEST_DATA_DIR";
const CONFIG_FILE: &str = "config.json";
const JOURNAL_FILE: &str = "journal.jsonl";
const CHECKPOINT_DIR: &str = "checkpoint";

/// Checkpoint root: explicit value, then the environment, then `./activest-data`.
pub fn resolve_data_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("activest-data"))
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Conflict(_) | Error::DuplicateSupervoxel { .. } => StatusCode::CONFLICT,
            Error::InvalidSubmission(_)
            | Error::ClassOutOfRange { .. }
            | Error::InvalidParameter(_)
            | Error::Json(_)
            | Error::Labels(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusBody {
    pub iteration: usize,
    pub status: Status,
    pub budget_used: usize,
    pub total_iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One submitted label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelIn {
    pub scene: String,
    pub point: u32,
    pub class_id: u32,
}

#[derive(Clone)]
struct Snapshot {
    status: StatusBody,
    pending: Option<QuerySet>,
    metrics_csv: String,
    summaries: Option<Arc<Vec<EnsembleSummary>>>,
}

fn snapshot_of(state: &ExperimentState, error: Option<String>) -> Snapshot {
    Snapshot {
        status: StatusBody {
            iteration: state.iteration(),
            status: state.status(),
            budget_used: state.budget_used(),
            total_iterations: state.config().budget.iterations_k,
            error,
        },
        pending: state.pending().cloned(),
        metrics_csv: metrics_csv(state.metrics()),
        summaries: state.summaries().map(|s| Arc::new(s.to_vec())),
    }
}

enum Command {
    Submit { labels: Vec<LabelIn>, reply: oneshot::Sender<ApiResult<StatusBody>> },
    Trained { state: Box<ExperimentState>, result: Result<(), Error> },
}

struct Session {
    dataset: Arc<PreparedDataset>,
    snapshot: RwLock<Snapshot>,
    commands: mpsc::Sender<Command>,
}

impl Session {
    fn snapshot(&self) -> Snapshot {
        self.snapshot.read().expect("snapshot lock").clone()
    }
}

struct Actor {
    dir: PathBuf,
    dataset: Arc<PreparedDataset>,
    session: Arc<Session>,
    state: Option<ExperimentState>,
    journal: Journal,
    inbox: mpsc::Receiver<Command>,
    outbox: mpsc::Sender<Command>,
}

impl Actor {
    fn publish(&self, state: &ExperimentState, error: Option<String>) {
        *self.session.snapshot.write().expect("snapshot lock") = snapshot_of(state, error);
    }

    fn start_training(&mut self, state: ExperimentState) {
        let dataset = self.dataset.clone();
        let dir = self.dir.join(CHECKPOINT_DIR);
        let outbox = self.outbox.clone();
        tokio::task::spawn_blocking(move || {
            let mut state = state;
            let result = state.train_round(&dataset).and_then(|_| checkpoint(&state, &dir));
            let _ = outbox.blocking_send(Command::Trained { state: Box::new(state), result });
        });
    }

    fn submit(&mut self, labels: Vec<LabelIn>) -> ApiResult<StatusBody> {
        let Some(state) = self.state.as_ref() else {
            return Err(ApiError::new(StatusCode::CONFLICT, "experiment is training"));
        };
        if state.status() != Status::AwaitingAnnotations {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("experiment is {:?}", state.status())));
        }
        let annotations: Vec<Annotation> = labels
            .into_iter()
            .map(|l| Annotation {
                scene_id: l.scene,
                point_index: l.point,
                class_id: l.class_id,
                iteration: state.iteration() as u32,
                source: AnnotationSource::Human,
            })
            .collect();
        state.check_submission(&annotations, &self.dataset)?;
        // Durable before acknowledged.
        self.journal.append(&annotations)?;
        let mut state = self.state.take().expect("checked above");
        if let Err(e) = state.submit(&annotations, &self.dataset) {
            self.state = Some(state);
            return Err(e.into());
        }
        self.publish(&state, None);
        let body = self.session.snapshot().status;
        self.start_training(state);
        Ok(body)
    }

    async fn run(mut self) {
        while let Some(cmd) = self.inbox.recv().await {
            match cmd {
                Command::Submit { labels, reply } => {
                    let _ = reply.send(self.submit(labels));
                }
                Command::Trained { state, result } => {
                    let error = result.err().map(|e| e.to_string());
                    self.publish(&state, error);
                    self.state = Some(*state);
                }
            }
        }
    }
}

/// All experiments under one data directory.
pub struct AppState {
    data_dir: PathBuf,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    create_lock: tokio::sync::Mutex<()>,
}

impl AppState {
    /// Open a data directory, resuming every experiment found in it.
    ///
    /// Journal entries newer than an experiment's checkpoint (a crash between
    /// acknowledging labels and finishing training) are re-applied once.
    pub async fn open(data_dir: impl AsRef<Path>) -> activest::Result<Arc<Self>> {
        let data_dir = data_dir.as_ref().to_path_buf();
        fs::create_dir_all(&data_dir).map_err(|e| Error::Io { path: data_dir.clone(), source: e })?;
        let app = Arc::new(AppState {
            data_dir: data_dir.clone(),
            sessions: RwLock::new(BTreeMap::new()),
            create_lock: tokio::sync::Mutex::new(()),
        });
        let mut entries: Vec<PathBuf> = fs::read_dir(&data_dir)
            .map_err(|e| Error::Io { path: data_dir.clone(), source: e })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(CONFIG_FILE).is_file() && p.join(CHECKPOINT_DIR).is_dir())
            .collect();
        entries.sort();
        for dir in entries {
            let id = dir.file_name().unwrap().to_string_lossy().to_string();
            let loaded = tokio::task::spawn_blocking(move || load_session(&dir))
                .await
                .map_err(|e| Error::Experiment(e.to_string()))??;
            app.install(id, loaded.0, loaded.1, loaded.2);
        }
        Ok(app)
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    fn install(&self, id: String, dataset: Arc<PreparedDataset>, state: ExperimentState, journal: Journal) {
        let (tx, rx) = mpsc::channel(64);
        let session = Arc::new(Session {
            dataset: dataset.clone(),
            snapshot: RwLock::new(snapshot_of(&state, None)),
            commands: tx.clone(),
        });
        let resume_training = state.status() == Status::Training;
        let mut actor = Actor {
            dir: self.data_dir.join(&id),
            dataset,
            session: session.clone(),
            state: Some(state),
            journal,
            inbox: rx,
            outbox: tx,
        };
        if resume_training {
            let st = actor.state.take().unwrap();
            actor.start_training(st);
        }
        tokio::spawn(actor.run());
        self.sessions.write().expect("sessions lock").insert(id, session);
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown experiment `{id}`")))
    }

    /// Create and start an experiment, returning its id.
    pub async fn create(&self, config: ExperimentConfig) -> activest::Result<String> {
        config.validate()?;
        let _guard = self.create_lock.lock().await;
        let next = self.sessions.read().expect("sessions lock").len() + 1;
        let mut n = next;
        let id = loop {
            let id = format!("exp-{n:04}");
            if !self.data_dir.join(&id).exists() {
                break id;
            }
            n += 1;
        };
        let dir = self.data_dir.join(&id);
        let (dataset, state, journal) = tokio::task::spawn_blocking(move || -> activest::Result<_> {
            let dataset = PreparedDataset::from_config(&config)?;
            let state = ExperimentState::start(config.clone(), &dataset)?;
            fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            checkpoint(&state, dir.join(CHECKPOINT_DIR))?;
            let cfg_path = dir.join(CONFIG_FILE);
            fs::write(&cfg_path, config.to_json()).map_err(|e| Error::Io { path: cfg_path, source: e })?;
            let journal = Journal::open(dir.join(JOURNAL_FILE))?;
            Ok((Arc::new(dataset), state, journal))
        })
        .await
        .map_err(|e| Error::Experiment(e.to_string()))??;
        self.install(id.clone(), dataset, state, journal);
        Ok(id)
    }
}

fn load_session(dir: &Path) -> activest::Result<(Arc<PreparedDataset>, ExperimentState, Journal)> {
    let config = ExperimentConfig::load(dir.join(CONFIG_FILE))?;
    let dataset = PreparedDataset::from_config(&config)?;
    let mut state = resume(dir.join(CHECKPOINT_DIR))?;
    let journal_path = dir.join(JOURNAL_FILE);
    if state.status() == Status::AwaitingAnnotations {
        let current: Vec<Annotation> = read_journal(&journal_path)?
            .into_iter()
            .filter(|a| a.iteration as usize == state.iteration())
            .collect();
        if !current.is_empty() {
            state.submit(&current, &dataset)?;
        }
    }
    Ok((Arc::new(dataset), state, Journal::open(journal_path)?))
}

#[derive(Serialize)]
struct ExperimentListItem {
    id: String,
    iteration: usize,
    status: Status,
}

async fn list_experiments(State(app): State<Arc<AppState>>) -> Json<Vec<ExperimentListItem>> {
    let sessions = app.sessions.read().expect("sessions lock");
    Json(
        sessions
            .iter()
            .map(|(id, s)| {
                let snap = s.snapshot();
                ExperimentListItem { id: id.clone(), iteration: snap.status.iteration, status: snap.status.status }
            })
            .collect(),
    )
}

async fn create_experiment(
    State(app): State<Arc<AppState>>,
    body: axum::body::Bytes,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let config: ExperimentConfig =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let id = app.create(config).await?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "id": id }))))
}

async fn status(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<StatusBody>> {
    Ok(Json(app.session(&id)?.snapshot().status))
}

fn binary(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/octet-stream")], Body::from(bytes)).into_response()
}

async fn scene_cloud(
    State(app): State<Arc<AppState>>,
    UrlPath((id, sid)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let scene = session.dataset.scene(&sid).ok_or_else(|| ApiError::not_found(format!("unknown scene `{sid}`")))?;
    let cloud = scene.cloud.clone().without_ground_truth();
    let mut bytes = Vec::new();
    write_cloud(&cloud, &mut bytes, CloudFormat::TableBinary)?;
    Ok(binary(bytes))
}

async fn scene_heatmap(
    State(app): State<Arc<AppState>>,
    UrlPath((id, sid)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let j = session.dataset.scene_index(&sid).ok_or_else(|| ApiError::not_found(format!("unknown scene `{sid}`")))?;
    let summaries = session.snapshot().summaries.ok_or_else(|| ApiError::not_found("no uncertainty map yet"))?;
    let mut bytes = Vec::new();
    write_summary(&summaries[j], &mut bytes).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(binary(bytes))
}

async fn queries(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<QuerySet>> {
    let snap = app.session(&id)?.snapshot();
    match (snap.status.status, snap.pending) {
        (Status::AwaitingAnnotations, Some(q)) => Ok(Json(q)),
        (s, _) => Err(ApiError::new(StatusCode::CONFLICT, format!("no pending queries while {s:?}"))),
    }
}

async fn submit_labels(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: axum::body::Bytes,
) -> ApiResult<Json<StatusBody>> {
    let session = app.session(&id)?;
    let labels: Vec<LabelIn> =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let (reply, rx) = oneshot::channel();
    session
        .commands
        .send(Command::Submit { labels, reply })
        .await
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "experiment actor stopped"))?;
    let body = rx.await.map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "experiment actor stopped"))??;
    Ok(Json(body))
}

async fn metrics(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let csv = app.session(&id)?.snapshot().metrics_csv;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/experiments", get(list_experiments).post(create_experiment))
        .route("/api/v1/experiments/{id}/status", get(status))
        .route("/api/v1/experiments/{id}/scene/{sid}/cloud", get(scene_cloud))
        .route("/api/v1/experiments/{id}/scene/{sid}/heatmap", get(scene_heatmap))
        .route("/api/v1/experiments/{id}/queries", get(queries))
        .route("/api/v1/experiments/{id}/labels", post(submit_labels))
        .route("/api/v1/experiments/{id}/metrics", get(metrics))
        .with_state(app)
}

/// Serve until interrupted.
pub async fn serve(app: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
