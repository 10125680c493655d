//! Session-oriented HTTP/JSON API.
//!
//! Turns for one session run strictly in arrival order: each request waits
//! on a fair (FIFO) lock before its turn is processed. Reads return the state
//! as of the last completed turn and never wait for a running turn.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use schemars::JsonSchema;
use senseslam::{
    ConfidenceReport, EngineError, Role, SenseInventory, Session, SessionConfig, SessionSnapshot,
    Utterance,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::net::TcpListener;

use crate::projection::Projection;

/// Inventory name used when a request does not name one.
pub const DEFAULT_INVENTORY: &str = "default";

#[derive(Debug, Clone, Default, Serialize, Deserialize, JsonSchema)]
pub struct CreateSession {
    /// Name of an inventory loaded by the service; defaults to `"default"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inventory: Option<String>,
    /// Labels to track. Taken from the snapshot when resuming.
    #[serde(default)]
    pub targets: Vec<String>,
    /// Config fields overriding the service's base config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Value>,
    /// Senses hidden from this session, as `label → sense id`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub withhold: BTreeMap<String, String>,
    /// Resume from an exported state instead of starting fresh.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<SessionSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SessionHandle {
    pub id: String,
    /// Unix time, seconds.
    pub created_at: u64,
    pub inventory: String,
    pub config: SessionConfig,
    pub targets: Vec<String>,
    pub particle_count: usize,
    pub turn: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct PostUtterance {
    pub role: Role,
    /// Whitespace-separated tokens.
    pub text: String,
    /// Time stamp; defaults to one past the previous utterance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TurnResponse {
    /// Turns processed so far, including this one.
    pub turn: u32,
    pub t: u32,
    pub confidences: BTreeMap<String, ConfidenceReport>,
    /// Sense of each interpreted target in the best-estimate particle.
    pub best: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ProjectedParticle {
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ProjectionView {
    #[serde(flatten)]
    pub basis: Projection,
    pub particles: Vec<ProjectedParticle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct StateResponse {
    pub handle: SessionHandle,
    pub snapshot: SessionSnapshot,
    pub projection: ProjectionView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Deserialize)]
struct LabelQuery {
    label: Option<String>,
}

/// Error with its HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id:?}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                error: self.message,
            }),
        )
            .into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

/// State visible to readers: a consistent copy from after the last
/// completed turn.
struct View {
    turn: u32,
    snapshot: Arc<SessionSnapshot>,
    confidences: BTreeMap<String, ConfidenceReport>,
    best: BTreeMap<String, String>,
}

impl View {
    fn capture(session: &Session) -> Result<Self, EngineError> {
        Ok(Self {
            turn: session.turn(),
            snapshot: Arc::new(session.snapshot()),
            confidences: confidences(session)?,
            best: best_senses(session),
        })
    }
}

struct Entry {
    handle: SessionHandle,
    projection: Projection,
    session: Arc<tokio::sync::Mutex<Session>>,
    view: RwLock<View>,
}

impl Entry {
    fn view(&self) -> std::sync::RwLockReadGuard<'_, View> {
        self.view.read().unwrap_or_else(|e| e.into_inner())
    }

    fn handle(&self) -> SessionHandle {
        SessionHandle {
            turn: self.view().turn,
            ..self.handle.clone()
        }
    }
}

pub struct AppState {
    inventories: BTreeMap<String, Arc<SenseInventory>>,
    base_config: Value,
    sessions: Mutex<HashMap<String, Arc<Entry>>>,
    next_id: AtomicU64,
}

impl AppState {
    /// Service over named inventories. `base_config` supplies every field a
    /// create request leaves out, except `dim`, which follows the inventory
    /// unless given explicitly.
    pub fn new(
        inventories: BTreeMap<String, Arc<SenseInventory>>,
        base_config: Option<SessionConfig>,
    ) -> Self {
        let base_config = base_config
            .map(|c| serde_json::to_value(c).expect("config serializes"))
            .unwrap_or_else(|| Value::Object(Default::default()));
        Self {
            inventories,
            base_config,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    /// Service over one inventory registered as `"default"`.
    pub fn single(inventory: SenseInventory, base_config: Option<SessionConfig>) -> Self {
        Self::new(
            BTreeMap::from([(DEFAULT_INVENTORY.to_string(), Arc::new(inventory))]),
            base_config,
        )
    }

    fn entry(&self, id: &str) -> Result<Arc<Entry>, ApiError> {
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    fn config_for(
        &self,
        inventory: &SenseInventory,
        overrides: Option<&Value>,
    ) -> Result<SessionConfig, ApiError> {
        let mut merged = self.base_config.clone();
        let obj = merged.as_object_mut().expect("base config is an object");
        if !obj.contains_key("dim") {
            obj.insert("dim".into(), inventory.dim().into());
        }
        match overrides {
            None => {}
            Some(Value::Object(fields)) => {
                for (k, v) in fields {
                    obj.insert(k.clone(), v.clone());
                }
            }
            Some(_) => {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "config must be an object",
                ))
            }
        }
        serde_json::from_value(merged)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid config: {e}")))
    }

    fn create(&self, req: CreateSession) -> Result<SessionHandle, ApiError> {
        let name = req
            .inventory
            .unwrap_or_else(|| DEFAULT_INVENTORY.to_string());
        let mut inventory = self.inventories.get(&name).cloned().ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, format!("no inventory {name:?}"))
        })?;
        for (label, sense) in &req.withhold {
            let reduced = inventory
                .without_sense(label, sense)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
            inventory = Arc::new(reduced);
        }
        let bad = |e: EngineError| ApiError::new(StatusCode::BAD_REQUEST, e.to_string());
        let session = match req.snapshot {
            Some(snap) => Session::from_snapshot(snap, inventory.clone()).map_err(bad)?,
            None => {
                let cfg = self.config_for(&inventory, req.config.as_ref())?;
                Session::new(cfg, inventory.clone(), &req.targets).map_err(bad)?
            }
        };
        let mut vectors: Vec<&[f64]> = Vec::new();
        for label in session.targets() {
            for s in inventory.senses(label).unwrap_or_default() {
                vectors.push(&s.vector);
            }
        }
        let projection = Projection::principal(&vectors).ok_or_else(|| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "targets have no sense vectors to project",
            )
        })?;
        let view = View::capture(&session).map_err(bad)?;
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let handle = SessionHandle {
            id: id.clone(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            inventory: name,
            config: session.config().clone(),
            targets: session.targets().to_vec(),
            particle_count: session.particle_count(),
            turn: session.turn(),
        };
        let entry = Entry {
            handle: handle.clone(),
            projection,
            session: Arc::new(tokio::sync::Mutex::new(session)),
            view: RwLock::new(view),
        };
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, Arc::new(entry));
        Ok(handle)
    }
}

fn confidences(session: &Session) -> Result<BTreeMap<String, ConfidenceReport>, EngineError> {
    session
        .targets()
        .iter()
        .map(|label| Ok((label.clone(), session.confidence(label)?)))
        .collect()
}

fn best_senses(session: &Session) -> BTreeMap<String, String> {
    let targets = session.targets();
    session
        .best_assignments()
        .into_iter()
        .filter(|(label, _)| targets.contains(label))
        .collect()
}

fn turn_error(e: EngineError) -> ApiError {
    let status = match &e {
        EngineError::OutOfOrder { .. } => StatusCode::CONFLICT,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    };
    ApiError::new(status, e.to_string())
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionHandle>), ApiError> {
    let Json(req) = body?;
    let handle = app.create(req)?;
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn post_utterance(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<PostUtterance>, JsonRejection>,
) -> Result<Json<TurnResponse>, ApiError> {
    let entry = app.entry(&id)?;
    let Json(req) =
        body.map_err(|r| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, r.body_text()))?;
    if req.text.split_whitespace().next().is_none() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "utterance has no tokens",
        ));
    }
    // tokio's mutex is fair, so waiting turns run in arrival order
    let mut session = entry.session.clone().lock_owned().await;
    let task = tokio::task::spawn_blocking(move || {
        let t = req
            .t
            .unwrap_or_else(|| session.last_t().map_or(0, |last| last + 1));
        let utt = Utterance::from_text(req.role, &req.text, t);
        session.process_turn(&utt).map_err(turn_error)?;
        let view = View::capture(&session).map_err(turn_error)?;
        let response = TurnResponse {
            turn: view.turn,
            t,
            confidences: view.confidences.clone(),
            best: view.best.clone(),
        };
        *entry.view.write().unwrap_or_else(|e| e.into_inner()) = view;
        drop(session);
        Ok::<_, ApiError>(response)
    });
    let response = task
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(response))
}

async fn get_state(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<StateResponse>, ApiError> {
    let entry = app.entry(&id)?;
    let snapshot = entry.view().snapshot.clone();
    let particles = snapshot
        .particles
        .iter()
        .map(|p| {
            let [x, y] = entry.projection.project(&p.context);
            ProjectedParticle {
                x,
                y,
                weight: p.weight,
            }
        })
        .collect();
    Ok(Json(StateResponse {
        handle: entry.handle(),
        snapshot: snapshot.as_ref().clone(),
        projection: ProjectionView {
            basis: entry.projection.clone(),
            particles,
        },
    }))
}

async fn get_confidences(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<LabelQuery>,
) -> Result<Json<ConfidenceReport>, ApiError> {
    let entry = app.entry(&id)?;
    let label = q
        .label
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing query parameter `label`"))?;
    let report = entry.view().confidences.get(&label).cloned();
    report.map(Json).ok_or_else(|| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("{label:?} is not a target of this session"),
        )
    })
}

async fn delete_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    app.sessions
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or_else(|| ApiError::not_found(&id))
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/utterances", post(post_utterance))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/confidences", get(get_confidences))
        .with_state(app)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, app: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(app)).await
}
