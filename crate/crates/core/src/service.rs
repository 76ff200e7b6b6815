//! JSON session API over HTTP.
//!
//! | method | path | result |
//! |---|---|---|
//! | `POST` | `/sessions` | `{session_id}` (201) |
//! | `GET` | `/sessions/{id}` | [`SessionView`] |
//! | `POST` | `/sessions/{id}/cards` | [`SessionView`] after ingesting the card |
//! | `GET` | `/sessions/{id}/trajectory` | array of [`TrajectoryPoint`] |
//! | `DELETE` | `/sessions/{id}` | final [`SessionSnapshot`] |
//! | `GET` | `/health` | `{"status": "ok"}` |
//!
//! Card posts accept an `Idempotency-Key` header; a repeated key returns the
//! first response without ingesting again. Errors are `{"error": ...}` with
//! 404 (unknown session), 409 (session stopped or stratum exhausted) or 422
//! (invalid body). Strata are numbered from 1.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tower_http::cors::{Any, CorsLayer};

use crate::engine::{AuditConfig, AuditSession, SessionSnapshot, Status, TrajectoryPoint};
use crate::error::{AuditError, Result};
use crate::ingest::parse_assorter_value;

/// Per-stratum progress in a [`SessionView`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCount {
    pub stratum: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub sampled: u64,
    pub size: u64,
    pub kind: crate::assorter::AuditKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub status: Status,
    pub p_fisher: f64,
    pub p_intersection: f64,
    pub headline_combiner: crate::combiner::CombinerKind,
    pub risk_limit: f64,
    pub counts: Vec<StratumCount>,
    pub draws: u64,
    /// 1-based; absent once the audit has stopped or run out of cards.
    pub recommended_stratum: Option<usize>,
    pub rationale: String,
}

/// A card as posted by the console. Values are numbers or vote letters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardRequest {
    pub stratum: usize,
    pub mvr: Value,
    #[serde(default)]
    pub cvr: Option<Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredSession {
    snapshot: SessionSnapshot,
    #[serde(default)]
    idempotency: HashMap<String, (u16, Value)>,
}

struct Entry {
    session: AuditSession,
    idempotency: HashMap<String, (u16, Value)>,
}

/// Shared server state: live sessions plus an optional snapshot directory.
#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Arc<Mutex<Entry>>>>>,
    snapshot_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new() -> Self {
        AppState::default()
    }

    /// Persists every session to `dir` after each change and restores the
    /// sessions already there by replaying their draw logs.
    pub fn with_snapshot_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let mut sessions = HashMap::new();
        for item in std::fs::read_dir(&dir)? {
            let path = item?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let id = match path.file_stem().and_then(|s| s.to_str()) {
                Some(id) => id.to_string(),
                None => continue,
            };
            let stored: StoredSession = serde_json::from_reader(std::fs::File::open(&path)?)?;
            let session = AuditSession::from_snapshot(&stored.snapshot)?;
            tracing::info!(%id, draws = session.num_draws(), "restored session");
            sessions.insert(
                id,
                Arc::new(Mutex::new(Entry {
                    session,
                    idempotency: stored.idempotency,
                })),
            );
        }
        Ok(AppState {
            sessions: Arc::new(RwLock::new(sessions)),
            snapshot_dir: Some(dir),
        })
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    fn get(&self, id: &str) -> std::result::Result<Arc<Mutex<Entry>>, ApiError> {
        self.sessions
            .read()
            .expect("lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session `{id}`")))
    }

    fn persist(&self, id: &str, entry: &Entry) -> Result<()> {
        if let Some(dir) = &self.snapshot_dir {
            let stored = StoredSession {
                snapshot: entry.session.snapshot(),
                idempotency: entry.idempotency.clone(),
            };
            let tmp = dir.join(format!("{id}.json.tmp"));
            std::fs::write(&tmp, serde_json::to_vec(&stored)?)?;
            std::fs::rename(&tmp, snapshot_path(dir, id))?;
        }
        Ok(())
    }
}

fn snapshot_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<AuditError> for ApiError {
    fn from(e: AuditError) -> Self {
        let status = match &e {
            AuditError::Stopped | AuditError::AllExhausted | AuditError::Exhausted { .. } => StatusCode::CONFLICT,
            AuditError::Config(_)
            | AuditError::Domain(_)
            | AuditError::Contract(_)
            | AuditError::Parse { .. }
            | AuditError::Fixture(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AuditError::Lp(_) | AuditError::Io(_) | AuditError::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn view(id: &str, session: &AuditSession) -> SessionView {
    let config = session.config();
    let counts = config
        .strata
        .iter()
        .zip(session.counts())
        .enumerate()
        .map(|(k, (s, &sampled))| StratumCount {
            stratum: k + 1,
            name: s.name.clone(),
            sampled,
            size: s.size,
            kind: s.assorter.kind,
        })
        .collect();
    let (recommended_stratum, rationale) = match session.recommended_stratum() {
        Ok(r) => (Some(r.stratum + 1), r.rationale),
        Err(AuditError::Stopped) => (
            None,
            format!(
                "audit stopped: {} P-value {} is at most the risk limit {}",
                config.combiner.label(),
                session.headline_p(),
                config.risk_limit
            ),
        ),
        Err(e) => (None, e.to_string()),
    };
    SessionView {
        session_id: id.to_string(),
        status: session.status(),
        p_fisher: session.risk().p_fisher,
        p_intersection: session.risk().p_intersection,
        headline_combiner: config.combiner,
        risk_limit: config.risk_limit,
        counts,
        draws: session.num_draws(),
        recommended_stratum,
        rationale,
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(format!("invalid body: {e}")))
}

fn card_value(v: &Value, field: &str) -> ApiResult<f64> {
    let parsed = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => parse_assorter_value(s.trim()),
        _ => None,
    };
    parsed.ok_or_else(|| ApiError::unprocessable(format!("`{field}` must be a number or one of w, l, o")))
}

fn new_session_id() -> String {
    format!("{:016x}", rand::random::<u64>())
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let config: AuditConfig = parse_json(&body)?;
    let session = AuditSession::new(config)?;
    let entry = Entry {
        session,
        idempotency: HashMap::new(),
    };
    let mut sessions = state.sessions.write().expect("lock");
    let mut id = new_session_id();
    while sessions.contains_key(&id) {
        id = new_session_id();
    }
    state.persist(&id, &entry)?;
    sessions.insert(id.clone(), Arc::new(Mutex::new(entry)));
    tracing::info!(%id, "created session");
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "session_id": id }))))
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let entry = state.get(&id)?;
    let entry = entry.lock().expect("lock");
    Ok(Json(view(&id, &entry.session)))
}

async fn post_card(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let entry = state.get(&id)?;
    let mut entry = entry.lock().expect("lock");
    let key = headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    if let Some((status, body)) = key.as_ref().and_then(|k| entry.idempotency.get(k)) {
        let status = StatusCode::from_u16(*status).unwrap_or(StatusCode::OK);
        let mut resp = (status, Json(body.clone())).into_response();
        resp.headers_mut().insert("idempotent-replay", HeaderValue::from_static("true"));
        return Ok(resp);
    }
    let result = ingest(&id, &mut entry.session, &body);
    let (status, body) = match result {
        Ok(v) => (StatusCode::OK, serde_json::to_value(v).map_err(AuditError::from)?),
        Err(e) => (e.status, serde_json::json!({ "error": e.message })),
    };
    let keyed = key.is_some();
    if let Some(k) = key {
        entry.idempotency.insert(k, (status.as_u16(), body.clone()));
    }
    if status == StatusCode::OK || keyed {
        state.persist(&id, &entry)?;
    }
    Ok((status, Json(body)).into_response())
}

fn ingest(id: &str, session: &mut AuditSession, body: &Bytes) -> ApiResult<SessionView> {
    let card: CardRequest = parse_json(body)?;
    let k = session.config().strata.len();
    if card.stratum == 0 || card.stratum > k {
        return Err(ApiError::unprocessable(format!(
            "`stratum` must be between 1 and {k}, got {}",
            card.stratum
        )));
    }
    let mvr = card_value(&card.mvr, "mvr")?;
    let cvr = match &card.cvr {
        None | Some(Value::Null) => None,
        Some(v) => Some(card_value(v, "cvr")?),
    };
    session.ingest_card(card.stratum - 1, mvr, cvr)?;
    Ok(view(id, session))
}

async fn get_trajectory(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Vec<TrajectoryPoint>>> {
    let entry = state.get(&id)?;
    let entry = entry.lock().expect("lock");
    Ok(Json(entry.session.trajectory().to_vec()))
}

async fn delete_session(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<SessionSnapshot>> {
    let entry = state
        .sessions
        .write()
        .expect("lock")
        .remove(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session `{id}`")))?;
    if let Some(dir) = &state.snapshot_dir {
        let path = snapshot_path(dir, &id);
        if path.exists() {
            std::fs::remove_file(path).map_err(AuditError::from)?;
        }
    }
    let snapshot = entry.lock().expect("lock").session.snapshot();
    Ok(Json(snapshot))
}

async fn health() -> Json<Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

/// Routes with CORS open to `origin`, or to any origin when `None`.
pub fn router(state: AppState, origin: Option<HeaderValue>) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match origin {
        Some(o) => cors.allow_origin(o),
        None => cors.allow_origin(Any),
    };
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/cards", post(post_card))
        .route("/sessions/{id}/trajectory", get(get_trajectory))
        .layer(cors)
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: AppState, origin: Option<HeaderValue>) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state, origin))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
