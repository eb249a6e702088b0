//! HTTP surface over [`Engine`]: a thin shell, one writer per session.
//!
//! | method | path                    | body                                  |
//! |--------|-------------------------|---------------------------------------|
//! | POST   | `/sessions`             | [`CreateSession`]                     |
//! | POST   | `/sessions/{id}/messages` | [`SendMessage`]                     |
//! | GET    | `/sessions/{id}`        | —                                     |
//! | GET    | `/sessions/{id}/memory` | —                                     |

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{Engine, EngineError, RetrievalPolicy, SessionOptions, SessionState, TurnDecision};
use crate::gateway::GatewayError;
use crate::ranker::RankerError;
use crate::store::{HistoryBundle, Speaker, Utterance};
use crate::summarizer::{SummarizerError, TopicEntry};

/// Seconds a client should wait after a backend failure.
pub const RETRY_AFTER_SECS: u64 = 5;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub bundle_id: Option<String>,
    #[serde(default)]
    pub bundle: Option<HistoryBundle>,
    #[serde(default)]
    pub policy: Option<RetrievalPolicy>,
    /// Earlier exchanges; a trailing user utterance is answered at once.
    #[serde(default)]
    pub opening: Vec<Utterance>,
    #[serde(default)]
    pub max_turns: Option<u32>,
    #[serde(default)]
    pub nonce: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SendMessage {
    pub text: String,
    #[serde(default)]
    pub nonce: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTopic {
    pub rank: usize,
    pub topic_index: usize,
    pub dialogue_id: String,
    pub topic: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub retrieved_topic: Option<TopicEntry>,
    /// Empty until the first ranking.
    pub scores: Vec<ScoredTopic>,
    /// Present when the opening ended with a user utterance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<TurnDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageReply {
    pub decision: TurnDecision,
    pub shift_turn: Option<u32>,
    pub retrieved_topic: Option<TopicEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    #[serde(flatten)]
    pub state: SessionState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryView {
    pub session_id: String,
    pub topics: Vec<ScoredTopic>,
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Conflict(String),
    BadGateway(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind, message) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, "not_found", m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, "max_turns_exceeded", m),
            ApiError::BadGateway(m) => {
                let body = Json(json!({"error": "backend_unavailable", "message": m}));
                return (StatusCode::BAD_GATEWAY, [(header::RETRY_AFTER, RETRY_AFTER_SECS.to_string())], body)
                    .into_response();
            }
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m),
        };
        (status, Json(json!({"error": kind, "message": message}))).into_response()
    }
}

fn gateway_status(e: &GatewayError) -> fn(String) -> ApiError {
    match e {
        GatewayError::InvalidRequest(_) => ApiError::BadRequest,
        _ => ApiError::BadGateway,
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let msg = e.to_string();
        match &e {
            EngineError::MaxTurnsExceeded(_) => ApiError::Conflict(msg),
            EngineError::MalformedTurn(_) => ApiError::BadGateway(msg),
            EngineError::Gateway(g)
            | EngineError::Ranker(RankerError::Gateway(g))
            | EngineError::Summarizer(SummarizerError::Gateway { source: g, .. }) => gateway_status(g)(msg),
            EngineError::InvalidOpening(_)
            | EngineError::Precondition(_)
            | EngineError::Store(_)
            | EngineError::MissingMemory(_)
            | EngineError::Summarizer(_)
            | EngineError::Ranker(RankerError::InvalidContext(_) | RankerError::NoTopics) => ApiError::BadRequest(msg),
            EngineError::SessionAborted | EngineError::Ranker(_) => ApiError::Internal(msg),
        }
    }
}

struct Session {
    state: SessionState,
    replies: HashMap<String, MessageReply>,
}

pub struct ServiceState {
    engine: Arc<Engine>,
    bundles: HashMap<String, HistoryBundle>,
    defaults: SessionOptions,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    created: Mutex<HashMap<String, CreatedSession>>,
}

impl ServiceState {
    /// `bundles` are addressable by their anchor id.
    pub fn new(engine: Arc<Engine>, bundles: Vec<HistoryBundle>, defaults: SessionOptions) -> Self {
        Self {
            engine,
            bundles: bundles.into_iter().map(|b| (b.anchor_id.clone(), b)).collect(),
            defaults,
            sessions: Mutex::new(HashMap::new()),
            created: Mutex::new(HashMap::new()),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session `{id}`")))
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(send_message))
        .route("/sessions/{id}/memory", get(get_memory))
        .with_state(state)
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

fn scored(state: &SessionState) -> Vec<ScoredTopic> {
    state
        .ranking
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let t = &state.topics[c.topic_index];
            ScoredTopic {
                rank: i + 1,
                topic_index: c.topic_index,
                dialogue_id: t.dialogue_id.clone(),
                topic: t.topic.clone(),
                score: c.score,
            }
        })
        .collect()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn create_session(State(svc): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<CreatedSession>, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    if let Some(nonce) = &req.nonce {
        if let Some(done) = svc.created.lock().expect("nonce table").get(nonce) {
            return Ok(Json(done.clone()));
        }
    }
    let bundle = match (req.bundle, &req.bundle_id) {
        (Some(b), None) => b,
        (None, Some(id)) => {
            svc.bundles.get(id).cloned().ok_or_else(|| ApiError::NotFound(format!("no history bundle `{id}`")))?
        }
        _ => return Err(ApiError::BadRequest("give exactly one of bundle_id or bundle".into())),
    };
    let policy = req.policy.unwrap_or(svc.defaults.policy);
    let max_turns = req.max_turns.unwrap_or(svc.defaults.max_turns);
    let mut prefix = req.opening;
    let first = match prefix.last() {
        Some(u) if u.speaker == Speaker::User => prefix.pop().map(|u| u.text),
        _ => None,
    };

    let engine = svc.engine.clone();
    let (state, decision) = blocking(move || {
        let mut state = engine.open(bundle, prefix, policy, max_turns)?;
        let decision = match first {
            Some(text) => Some(engine.step(&mut state, &text)?),
            None => None,
        };
        Ok((state, decision))
    })
    .await?;

    let session_id = uuid::Uuid::new_v4().to_string();
    let created = CreatedSession {
        session_id: session_id.clone(),
        retrieved_topic: state.retrieved_topic().cloned(),
        scores: scored(&state),
        decision,
    };
    svc.sessions
        .lock()
        .expect("session table")
        .insert(session_id, Arc::new(Mutex::new(Session { state, replies: HashMap::new() })));
    if let Some(nonce) = req.nonce {
        svc.created.lock().expect("nonce table").insert(nonce, created.clone());
    }
    Ok(Json(created))
}

async fn send_message(
    State(svc): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<MessageReply>, ApiError> {
    let session = svc.session(&id)?;
    let req: SendMessage = parse_body(&body)?;
    let engine = svc.engine.clone();
    blocking(move || {
        // Held across the step: one writer per session.
        let mut s = session.lock().map_err(|_| ApiError::Internal("session poisoned".into()))?;
        if let Some(done) = req.nonce.as_ref().and_then(|n| s.replies.get(n)) {
            return Ok(Json(done.clone()));
        }
        let decision = engine.step(&mut s.state, &req.text)?;
        let reply = MessageReply {
            decision,
            shift_turn: s.state.shift_turn,
            retrieved_topic: s.state.retrieved_topic().cloned(),
        };
        if let Some(n) = req.nonce {
            s.replies.insert(n, reply.clone());
        }
        Ok(Json(reply))
    })
    .await
}

async fn get_session(
    State(svc): State<Arc<ServiceState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ApiError> {
    let session = svc.session(&id)?;
    let state = session.lock().map_err(|_| ApiError::Internal("session poisoned".into()))?.state.clone();
    Ok(Json(SessionView { session_id: id, state }))
}

async fn get_memory(
    State(svc): State<Arc<ServiceState>>,
    Path(id): Path<String>,
) -> Result<Json<MemoryView>, ApiError> {
    let session = svc.session(&id)?;
    let s = session.lock().map_err(|_| ApiError::Internal("session poisoned".into()))?;
    Ok(Json(MemoryView { session_id: id, topics: scored(&s.state) }))
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<ServiceState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
