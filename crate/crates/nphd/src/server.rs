//! HTTP evaluation service.
//!
//! | method | path                       | access |
//! |--------|----------------------------|--------|
//! | POST   | `/sessions`                | admin  |
//! | GET    | `/sessions/{id}`           | rater  |
//! | POST   | `/sessions/{id}/votes`     | rater  |
//! | GET    | `/sessions/{id}/aggregate` | admin  |
//! | GET    | `/healthz`                 | open   |
//!
//! Admin requests carry the shared secret in the `x-admin-secret` header.
//! Rater-facing responses never contain model names.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

use nphd_core::evalsvc::{create_session, Aggregate, BlindSession, EvalError, EvalSession, SessionRequest, VoteRecord, VoteRequest};

use crate::store::{valid_session_id, SessionStore};

pub const ADMIN_HEADER: &str = "x-admin-secret";
pub const ADMIN_SECRET_ENV: &str = "NPHD_ADMIN_SECRET";

struct Entry {
    session: EvalSession,
    /// Serializes appends to this session's vote log.
    writer: Mutex<()>,
}

pub struct AppState {
    store: SessionStore,
    admin_secret: String,
    sessions: RwLock<HashMap<String, Arc<Entry>>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

/// Blinded session plus a freshly minted anonymous rater token the client
/// may adopt on first contact.
#[derive(Debug, Serialize, Deserialize)]
pub struct RaterView {
    #[serde(flatten)]
    pub session: BlindSession,
    pub rater_token: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VoteAck {
    pub session_id: String,
    pub item_id: String,
    pub option_key: String,
    pub timestamp: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}"))
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        let status = match e {
            EvalError::UnknownItem(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Constant-time comparison of the presented secret.
fn authorized(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    let given = headers.get(ADMIN_HEADER).map(|v| v.as_bytes()).unwrap_or_default();
    let want = state.admin_secret.as_bytes();
    let same = given.len() == want.len() && given.iter().zip(want).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0;
    if same {
        Ok(())
    } else {
        Err(ApiError(StatusCode::UNAUTHORIZED, "admin secret required".into()))
    }
}

fn new_token() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl AppState {
    pub fn new(store: SessionStore, admin_secret: String) -> anyhow::Result<Self> {
        anyhow::ensure!(!admin_secret.is_empty(), "admin secret must not be empty");
        Ok(Self {
            store,
            admin_secret,
            sessions: RwLock::new(HashMap::new()),
        })
    }

    async fn entry(&self, id: &str) -> ApiResult<Arc<Entry>> {
        if let Some(e) = self.sessions.read().await.get(id) {
            return Ok(e.clone());
        }
        let not_found = || ApiError(StatusCode::NOT_FOUND, format!("unknown session {id}"));
        if !valid_session_id(id) {
            return Err(not_found());
        }
        let session = self.store.load_session(id)?.ok_or_else(not_found)?;
        let entry = Arc::new(Entry {
            session,
            writer: Mutex::new(()),
        });
        let mut map = self.sessions.write().await;
        Ok(map.entry(id.to_string()).or_insert(entry).clone())
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(req): Json<SessionRequest>,
) -> ApiResult<(StatusCode, Json<Created>)> {
    authorized(&state, &headers)?;
    let id = new_token();
    let session = create_session(id.clone(), now(), &req)?;
    state.store.save_session(&session)?;
    state.sessions.write().await.insert(
        id.clone(),
        Arc::new(Entry {
            session,
            writer: Mutex::new(()),
        }),
    );
    Ok((StatusCode::CREATED, Json(Created { session_id: id })))
}

async fn show(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<RaterView>> {
    let entry = state.entry(&id).await?;
    Ok(Json(RaterView {
        session: entry.session.blind(),
        rater_token: new_token(),
    }))
}

async fn vote(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<VoteRequest>,
) -> ApiResult<Json<VoteAck>> {
    let entry = state.entry(&id).await?;
    entry.session.validate_vote(&req)?;
    let record = VoteRecord {
        session_id: id.clone(),
        item_id: req.item_id,
        rater_id: req.rater_id,
        option_key: req.option_key,
        timestamp: now(),
    };
    let _guard = entry.writer.lock().await;
    state.store.append_vote(&record)?;
    Ok(Json(VoteAck {
        session_id: id,
        item_id: record.item_id,
        option_key: record.option_key,
        timestamp: record.timestamp,
    }))
}

async fn aggregate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<Json<Aggregate>> {
    authorized(&state, &headers)?;
    let entry = state.entry(&id).await?;
    let log = state.store.read_votes(&id)?;
    Ok(Json(entry.session.tally(&log)))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create))
        .route("/sessions/:id", get(show))
        .route("/sessions/:id/votes", post(vote))
        .route("/sessions/:id/aggregate", get(aggregate))
        .with_state(state)
}

/// Serves until the shutdown future resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}
