//! HTTP session API for the observer console.
//!
//! ```text
//! POST /sessions                      {"scenario": id}             -> snapshot
//! GET  /sessions/{id}/state                                        -> snapshot
//! GET  /sessions/{id}/proposals?k=N                                -> ranked proposals
//! POST /sessions/{id}/choose          {"index": i, "step": t?}     -> snapshot
//! POST /sessions/{id}/reset                                        -> snapshot
//! GET  /sessions/{id}/events                                       -> text/event-stream
//! GET  /scenarios                                                  -> scenario list
//! ```

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use taskseq::corpus::SequenceExample;
use taskseq::features::History;
use taskseq::model::{block_scores, top_k_in, CandidateSpace, TrainedModel, DEFAULT_MAX_STEPS};
use taskseq::world::{apply_primitive, task_goal_satisfied, Action, TaskSpec, WorldState};
use tokio::sync::{broadcast, Mutex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionStatus {
    AwaitingChoice,
    Running,
    Done,
    Aborted,
}

struct SessionData {
    state: WorldState,
    history: History,
    trace: Vec<Action>,
    status: SessionStatus,
}

struct Session {
    id: String,
    scenario: usize,
    data: Mutex<SessionData>,
    events: broadcast::Sender<String>,
}

/// Immutable model and corpus plus the live sessions.
pub struct AppState {
    model: TrainedModel,
    corpus: Vec<SequenceExample>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(model: TrainedModel, corpus: Vec<SequenceExample>) -> Arc<Self> {
        Arc::new(Self { model, corpus, sessions: RwLock::new(HashMap::new()), next_id: AtomicU64::new(1) })
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    error: String,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self { status, error: error.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub scenario_id: String,
    pub task: TaskSpec,
    pub status: SessionStatus,
    pub step: usize,
    pub state: WorldState,
    pub trace: Vec<Action>,
    pub goal_satisfied: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BlockScore {
    pub block: String,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Proposal {
    pub rank: usize,
    pub action: Action,
    pub label: String,
    pub score: f64,
    pub block_scores: Vec<BlockScore>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Proposals {
    pub step: usize,
    pub proposals: Vec<Proposal>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScenarioInfo {
    pub scenario_id: String,
    pub environment_id: String,
    pub task: TaskSpec,
    pub steps: usize,
}

#[derive(Debug, Deserialize)]
struct CreateBody {
    scenario: String,
}

#[derive(Debug, Deserialize)]
struct ChooseBody {
    index: usize,
    step: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct ProposalQuery {
    k: Option<usize>,
}

fn snapshot(app: &AppState, session: &Session, data: &SessionData) -> Snapshot {
    let ex = &app.corpus[session.scenario];
    Snapshot {
        session_id: session.id.clone(),
        scenario_id: ex.scenario_id.clone(),
        task: ex.task,
        status: data.status,
        step: data.trace.len(),
        state: data.state.clone(),
        trace: data.trace.clone(),
        goal_satisfied: task_goal_satisfied(&data.state, &ex.task).unwrap_or(false),
    }
}

fn publish(session: &Session, snap: &Snapshot) {
    if let Ok(text) = serde_json::to_string(snap) {
        let _ = session.events.send(text);
    }
}

fn fresh(ex: &SequenceExample) -> SessionData {
    SessionData {
        state: ex.initial_state.clone(),
        history: History::default(),
        trace: Vec::new(),
        status: SessionStatus::AwaitingChoice,
    }
}

async fn list_scenarios(State(app): State<Arc<AppState>>) -> Json<Vec<ScenarioInfo>> {
    Json(
        app.corpus
            .iter()
            .map(|e| ScenarioInfo {
                scenario_id: e.scenario_id.clone(),
                environment_id: e.environment_id.clone(),
                task: e.task,
                steps: e.steps.len(),
            })
            .collect(),
    )
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateBody>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<Snapshot>), ApiError> {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let scenario = app
        .corpus
        .iter()
        .position(|e| e.scenario_id == body.scenario)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown scenario {}", body.scenario)))?;
    let id = format!("s{}", app.next_id.fetch_add(1, Ordering::Relaxed));
    let (events, _) = broadcast::channel(64);
    let session = Arc::new(Session { id: id.clone(), scenario, data: Mutex::new(fresh(&app.corpus[scenario])), events });
    let snap = {
        let data = session.data.lock().await;
        snapshot(&app, &session, &data)
    };
    app.sessions.write().expect("session map").insert(id, session);
    Ok((StatusCode::CREATED, Json(snap)))
}

async fn get_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Snapshot>, ApiError> {
    let session = app.session(&id)?;
    let data = session.data.lock().await;
    Ok(Json(snapshot(&app, &session, &data)))
}

async fn get_proposals(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ProposalQuery>,
) -> Result<Json<Proposals>, ApiError> {
    let session = app.session(&id)?;
    let k = q.k.unwrap_or(3);
    if k == 0 {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "k must be at least 1"));
    }
    let data = session.data.lock().await;
    if data.status != SessionStatus::AwaitingChoice {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("session is {:?}", data.status)));
    }
    let task = &app.corpus[session.scenario].task;
    let w = &app.model.weights;
    let ranked = top_k_in(w, &data.state, task, &data.history, k, CandidateSpace::Executable);
    let proposals = ranked
        .into_iter()
        .enumerate()
        .map(|(rank, p)| Proposal {
            rank,
            action: p.action,
            label: p.action.to_string(),
            score: p.score,
            block_scores: block_scores(w, &data.state, task, &p.action, &data.history)
                .into_iter()
                .map(|(block, score)| BlockScore { block: block.to_string(), score })
                .collect(),
        })
        .collect();
    Ok(Json(Proposals { step: data.trace.len(), proposals }))
}

async fn choose(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<ChooseBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<Snapshot>, ApiError> {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let session = app.session(&id)?;
    let mut data = session.data.lock().await;
    if data.status != SessionStatus::AwaitingChoice {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("session is {:?}", data.status)));
    }
    if let Some(step) = body.step {
        if step != data.trace.len() {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("choice for step {step}, session is at step {}", data.trace.len())));
        }
    }
    let task = app.corpus[session.scenario].task;
    let ranked = top_k_in(&app.model.weights, &data.state, &task, &data.history, body.index + 1, CandidateSpace::Executable);
    let action = ranked
        .get(body.index)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("index {} out of {} proposals", body.index, ranked.len())))?
        .action;

    data.status = SessionStatus::Running;
    publish(&session, &snapshot(&app, &session, &data));
    let next = apply_primitive(&data.state, &action)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    data.state = next;
    data.history = data.history.push(action);
    data.trace.push(action);
    data.status = if action == Action::DONE {
        SessionStatus::Done
    } else if data.trace.len() >= DEFAULT_MAX_STEPS {
        SessionStatus::Aborted
    } else {
        SessionStatus::AwaitingChoice
    };
    let snap = snapshot(&app, &session, &data);
    publish(&session, &snap);
    Ok(Json(snap))
}

async fn reset(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Snapshot>, ApiError> {
    let session = app.session(&id)?;
    let mut data = session.data.lock().await;
    *data = fresh(&app.corpus[session.scenario]);
    let snap = snapshot(&app, &session, &data);
    publish(&session, &snap);
    Ok(Json(snap))
}

async fn events(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let session = app.session(&id)?;
    let (first, rx) = {
        let data = session.data.lock().await;
        (serde_json::to_string(&snapshot(&app, &session, &data)).unwrap_or_default(), session.events.subscribe())
    };
    let stream = futures::stream::unfold((Some(first), rx), |(first, mut rx)| async move {
        if let Some(text) = first {
            return Some((Ok(Event::default().event("snapshot").data(text)), (None, rx)));
        }
        loop {
            match rx.recv().await {
                Ok(text) => return Some((Ok(Event::default().event("snapshot").data(text)), (None, rx))),
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/scenarios", get(list_scenarios))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/proposals", get(get_proposals))
        .route("/sessions/{id}/choose", post(choose))
        .route("/sessions/{id}/reset", post(reset))
        .route("/sessions/{id}/events", get(events))
        .with_state(app)
}

/// Binds `127.0.0.1:port` (0 picks a free port) and serves in the background.
pub async fn spawn(app: Arc<AppState>, port: u16) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    let addr = listener.local_addr()?;
    let handle = tokio::spawn(async move { axum::serve(listener, router(app)).await });
    Ok((addr, handle))
}
