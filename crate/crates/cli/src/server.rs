//! In-memory diagnosis sessions over HTTP.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use diaformer::data::{SimulatorAnswer, SymptomSet, SymptomVocab};
use diaformer::infer::{Dialogue, InferError, InferenceConfig, Step};
use diaformer::net::Diaformer;
use serde::{Deserialize, Serialize};

pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionStatus {
    AwaitingAnswer,
    Diagnosed,
    Expired,
}

pub struct Session {
    pub id: String,
    pub dialogue: Dialogue,
    pub created: SystemTime,
    pub updated: SystemTime,
    touched: Instant,
    expired: bool,
}

impl Session {
    pub fn status(&self) -> SessionStatus {
        if self.expired {
            SessionStatus::Expired
        } else if self.dialogue.state.is_finished() {
            SessionStatus::Diagnosed
        } else {
            SessionStatus::AwaitingAnswer
        }
    }
}

struct Shared {
    model: Diaformer,
    vocab: SymptomVocab,
    config: InferenceConfig,
    ttl: Duration,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

/// Model, vocabulary and session table shared by all handlers.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(model: Diaformer, vocab: SymptomVocab, config: InferenceConfig, ttl: Duration) -> Self {
        Self(Arc::new(Shared {
            model,
            vocab,
            config,
            ttl,
            sessions: RwLock::new(HashMap::new()),
        }))
    }

    pub fn session_count(&self) -> usize {
        self.0.sessions.read().unwrap().len()
    }

    /// Marks idle sessions expired and drops ones idle for twice the TTL.
    pub fn sweep(&self) {
        let ttl = self.0.ttl;
        let mut sessions = self.0.sessions.write().unwrap();
        sessions.retain(|_, s| {
            let mut s = s.lock().unwrap();
            let idle = s.touched.elapsed();
            if idle >= ttl {
                s.expired = true;
            }
            idle < 2 * ttl
        });
    }

    fn lookup(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let session = self
            .0
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}")))?;
        {
            let mut s = session.lock().unwrap();
            if s.touched.elapsed() >= self.0.ttl {
                s.expired = true;
            }
        }
        Ok(session)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymptomRef {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnownSymptom {
    pub symptom: String,
    pub value: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub symptom: String,
    pub answer: SimulatorAnswer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiseaseProbability {
    pub disease: String,
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosisView {
    pub disease: String,
    pub probability: f64,
    pub distribution: Vec<DiseaseProbability>,
}

/// Wire form of a session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub status: SessionStatus,
    pub pending_question: Option<SymptomRef>,
    pub explicit: Vec<KnownSymptom>,
    pub acquired: Vec<KnownSymptom>,
    pub history: Vec<HistoryEntry>,
    pub turns: usize,
    pub stop_reason: Option<String>,
    pub diagnosis: Option<DiagnosisView>,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

fn unix_ms(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn view(session: &Session, vocab: &SymptomVocab) -> SessionView {
    let name = |s: usize| vocab.symptom_name(s).unwrap_or("?").to_string();
    let st = &session.dialogue.state;
    let known = |list: &[(usize, bool)]| {
        list.iter()
            .map(|&(s, value)| KnownSymptom { symptom: name(s), value })
            .collect()
    };
    let pending = match session.status() {
        SessionStatus::AwaitingAnswer => session.dialogue.pending(),
        _ => None,
    };
    SessionView {
        id: session.id.clone(),
        status: session.status(),
        pending_question: pending.map(|id| SymptomRef { id, name: name(id) }),
        explicit: known(&st.explicit),
        acquired: known(&st.acquired),
        history: st
            .history
            .iter()
            .map(|q| HistoryEntry { symptom: name(q.symptom), answer: q.answer })
            .collect(),
        turns: st.turns,
        stop_reason: st.stop_reason.map(|r| r.as_str().to_string()),
        diagnosis: st.diagnosis.as_ref().map(|d| DiagnosisView {
            disease: vocab.disease_name(d.disease).unwrap_or("?").to_string(),
            probability: d.probability as f64,
            distribution: d
                .distribution
                .iter()
                .enumerate()
                .map(|(i, &p)| DiseaseProbability {
                    disease: vocab.disease_name(i).unwrap_or("?").to_string(),
                    probability: p as f64,
                })
                .collect(),
        }),
        created_at_ms: unix_ms(session.created),
        updated_at_ms: unix_ms(session.updated),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub explicit_symptoms: SymptomSet,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    pub answer: SimulatorAnswer,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VocabView {
    pub symptoms: Vec<String>,
    pub diseases: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<InferError> for ApiError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::Finished | InferError::NoPendingQuestion => {
                Self::new(StatusCode::CONFLICT, e.to_string())
            }
            InferError::UnknownSymptom { .. } => Self::bad_request(e.to_string()),
            e => Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message });
        (self.status, Json(body)).into_response()
    }
}

async fn create_session(
    State(app): State<AppState>,
    body: Result<Json<CreateRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let Json(req) = body?;
    if req.explicit_symptoms.is_empty() {
        return Err(ApiError::bad_request("explicit_symptoms is empty"));
    }
    let vocab = &app.0.vocab;
    let explicit = req
        .explicit_symptoms
        .iter()
        .map(|(name, v)| {
            vocab
                .symptom_id(name)
                .map(|id| (id, v))
                .ok_or_else(|| ApiError::bad_request(format!("unknown symptom {name:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut dialogue = Dialogue::new(explicit, app.0.config)?;
    let shared = app.clone();
    let dialogue = tokio::task::spawn_blocking(move || {
        dialogue.advance(&shared.0.model, &shared.0.vocab)?;
        Ok::<_, InferError>(dialogue)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let now = SystemTime::now();
    let session = Session {
        id: uuid::Uuid::new_v4().simple().to_string(),
        dialogue,
        created: now,
        updated: now,
        touched: Instant::now(),
        expired: false,
    };
    let out = view(&session, vocab);
    app.0
        .sessions
        .write()
        .unwrap()
        .insert(session.id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(out)))
}

async fn answer_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<AnswerRequest>, JsonRejection>,
) -> Result<Json<SessionView>, ApiError> {
    let session = app.lookup(&id)?;
    let Json(req) = body?;
    let shared = app.clone();
    tokio::task::spawn_blocking(move || {
        let mut s = session.lock().unwrap();
        match s.status() {
            SessionStatus::AwaitingAnswer => {}
            other => {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("session is {other:?}, not awaiting an answer"),
                ))
            }
        }
        let step = s.dialogue.answer(&shared.0.model, &shared.0.vocab, req.answer)?;
        debug_assert!(matches!(step, Step::Ask(_) | Step::Finished(_)));
        s.updated = SystemTime::now();
        s.touched = Instant::now();
        Ok(Json(view(&s, &shared.0.vocab)))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn get_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ApiError> {
    let session = app.lookup(&id)?;
    let s = session.lock().unwrap();
    Ok(Json(view(&s, &app.0.vocab)))
}

async fn get_vocab(State(app): State<AppState>) -> Json<VocabView> {
    Json(VocabView {
        symptoms: app.0.vocab.symptoms().to_vec(),
        diseases: app.0.vocab.diseases().to_vec(),
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/answer", post(answer_session))
        .route("/vocab", get(get_vocab))
        .with_state(state)
}

/// Serves until ctrl-c, sweeping idle sessions once a minute.
pub async fn serve(state: AppState, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            sweeper.sweep();
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
