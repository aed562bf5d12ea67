//! JSON-over-HTTP facade: inquiry parsing with multi-turn refinement, guided
//! sampling with constraint filtering and ranking, and model management.

pub mod decide;
pub mod error;
pub mod session;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use gms_core::daydream::Objectives;
use gms_core::diffusion::{sample, NoiseSchedule, SampleRequest, Snapshot, TrainedModel};
use gms_core::domain::{CapacityClass, SkillProfile};
use gms_core::inquiry::{format_class, ConditionClass, InquiryBackend, InquiryError, SkillLevel};
use gms_core::nn::checkpoint::{self, CheckpointError, CheckpointMeta};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

pub use decide::{Decision, Satisfies};
pub use error::{ApiError, ApiResult, ErrorBody};
use session::SessionStore;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Samples drawn per requested decision before filtering.
    pub oversample: usize,
    pub session_ttl: Duration,
    /// Capacity used when a triple has none.
    pub default_capacity: Option<u32>,
    pub objectives: Objectives,
    /// Largest accepted `count` per sample request.
    pub max_count: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            oversample: 4,
            session_ttl: Duration::from_secs(3600),
            default_capacity: None,
            objectives: Objectives::default(),
            max_count: 256,
        }
    }
}

/// An immutable model snapshot; requests hold an `Arc` for their duration.
#[derive(Debug)]
pub struct ServedModel {
    pub model: TrainedModel,
    pub schedule: NoiseSchedule,
    pub path: Option<PathBuf>,
}

impl ServedModel {
    pub fn new(model: TrainedModel, path: Option<PathBuf>) -> Result<Self, String> {
        let schedule = model.schedule().map_err(|e| e.to_string())?;
        let meta = &model.meta;
        if meta.codec.grid_size != meta.architecture.grid_size {
            return Err(format!(
                "codec grid {} differs from the model grid {}",
                meta.codec.grid_size, meta.architecture.grid_size
            ));
        }
        if meta.bounds.asset_types > meta.codec.grid_size || meta.bounds.stations > meta.codec.grid_size {
            return Err("configuration bounds exceed the grid".into());
        }
        Ok(ServedModel { model, schedule, path })
    }

    pub fn descriptor(&self) -> ModelDescriptor {
        let meta = &self.model.meta;
        ModelDescriptor {
            path: self.path.as_ref().map(|p| p.display().to_string()),
            architecture: meta.architecture.clone(),
            steps: meta.steps,
            beta0: meta.beta0,
            beta_t: meta.beta_t,
            classes: meta.classes.clone(),
            asset_types: meta.bounds.asset_types,
            stations: meta.bounds.stations,
            max_count: meta.bounds.max_count,
            human_types: meta.human_types,
        }
    }

    fn reference(&self) -> SkillProfile {
        let meta = &self.model.meta;
        SkillProfile::reference(meta.bounds.asset_types, meta.human_types)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelDescriptor {
    pub path: Option<String>,
    pub architecture: gms_core::nn::Architecture,
    pub steps: usize,
    pub beta0: f64,
    pub beta_t: f64,
    pub classes: Vec<u32>,
    pub asset_types: usize,
    pub stations: usize,
    pub max_count: u32,
    pub human_types: usize,
}

pub struct AppState {
    pub config: ServiceConfig,
    backend: Arc<dyn InquiryBackend>,
    model: RwLock<Option<Arc<ServedModel>>>,
    sessions: Mutex<SessionStore>,
    requests: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig, backend: Arc<dyn InquiryBackend>) -> Arc<Self> {
        Arc::new(AppState {
            sessions: Mutex::new(SessionStore::new(config.session_ttl)),
            config,
            backend,
            model: RwLock::new(None),
            requests: AtomicU64::new(0),
        })
    }

    /// Current snapshot; later swaps do not affect a snapshot already taken.
    pub fn model(&self) -> Option<Arc<ServedModel>> {
        self.model.read().expect("model lock poisoned").clone()
    }

    pub fn install(&self, served: ServedModel) {
        *self.model.write().expect("model lock poisoned") = Some(Arc::new(served));
    }

    fn sessions(&self) -> std::sync::MutexGuard<'_, SessionStore> {
        self.sessions.lock().expect("session lock poisoned")
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any);
    Router::new()
        .route("/api/health", get(health))
        .route("/api/inquiry", post(inquiry))
        .route("/api/sample", post(sample_decisions))
        .route("/api/model", get(model_descriptor))
        .route("/api/model/load", post(load_model))
        .layer(cors)
        .with_state(state)
}

/// The API plus static files from `ui_dir` for every non-API path.
pub fn router_with_ui(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = router(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    }
}

/// Binds first so a taken port fails before anything is served.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router_with_ui(state, ui_dir.as_deref())).await
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model": state.model().map(|m| m.descriptor()),
        "inquiry_backend": state.backend.descriptor(),
    }))
}

#[derive(Debug, Deserialize)]
pub struct InquiryRequest {
    pub text: String,
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct InquiryResponse {
    pub session_id: String,
    /// Canonical rendering of the merged triple.
    pub triple: String,
    pub capacity: Option<u32>,
    pub skill: Option<SkillLevel>,
    pub max_machines: Option<u32>,
    /// This turn's parse before merging.
    pub parsed: String,
}

fn inquiry_error(e: InquiryError, text: &str) -> ApiError {
    let status = match e {
        InquiryError::Remote { .. } => StatusCode::BAD_GATEWAY,
        _ => StatusCode::BAD_REQUEST,
    };
    let code = match e {
        InquiryError::Remote { .. } => "inquiry_backend",
        _ => "parse_error",
    };
    ApiError::new(status, code, e.to_string()).with_detail(json!({ "text": text }))
}

async fn inquiry(
    State(state): State<Arc<AppState>>,
    body: Result<Json<InquiryRequest>, JsonRejection>,
) -> ApiResult<Json<InquiryResponse>> {
    let Json(req) = body?;
    if let Some(id) = &req.session_id {
        if state.sessions().get(id).is_none() {
            return Err(unknown_session(id));
        }
    }
    // remote backends block on network I/O
    let backend = state.backend.clone();
    let text = req.text.clone();
    let parsed = tokio::task::spawn_blocking(move || backend.parse(&text))
        .await?
        .map_err(|e| inquiry_error(e, &req.text))?;

    let mut sessions = state.sessions();
    let (id, triple) = match req.session_id {
        Some(id) => {
            let s = sessions.get_mut(&id).ok_or_else(|| unknown_session(&id))?;
            s.refine(req.text, parsed.clone());
            (id, s.triple.clone())
        }
        None => {
            let id = uuid::Uuid::new_v4().to_string();
            let s = sessions.create(id.clone(), req.text, parsed.clone());
            (id, s.triple.clone())
        }
    };
    Ok(Json(InquiryResponse {
        session_id: id,
        triple: format_class(&triple),
        capacity: triple.capacity,
        skill: triple.skill,
        max_machines: triple.max_machines,
        parsed: format_class(&parsed),
    }))
}

fn unknown_session(id: &str) -> ApiError {
    ApiError::new(
        StatusCode::NOT_FOUND,
        "unknown_session",
        "no such session (it may have expired)",
    )
    .with_detail(json!({ "session_id": id }))
}

/// A triple given inline, either as `"(240, None, 9)"` or as fields.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum TripleInput {
    Text(String),
    Fields {
        #[serde(default)]
        capacity: Option<u32>,
        #[serde(default)]
        skill: Option<SkillLevel>,
        #[serde(default)]
        max_machines: Option<u32>,
    },
}

impl TripleInput {
    fn resolve(self) -> ApiResult<ConditionClass> {
        let parsed = match self {
            TripleInput::Text(s) => s.parse::<ConditionClass>(),
            TripleInput::Fields {
                capacity,
                skill,
                max_machines,
            } => ConditionClass::new(capacity, skill, max_machines),
        };
        parsed.map_err(|e| ApiError::bad_request(e.to_string()))
    }
}

fn default_count() -> usize {
    5
}

fn default_w() -> f64 {
    2.0
}

#[derive(Debug, Deserialize)]
pub struct SampleApiRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub triple: Option<TripleInput>,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_w")]
    pub w: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Steps at which to record grids of the returned decisions.
    #[serde(default)]
    pub snapshots: Option<Vec<usize>>,
}

#[derive(Debug, Serialize)]
pub struct SampleApiResponse {
    pub triple: String,
    pub class: CapacityClass,
    pub seed: u64,
    pub sampled: usize,
    pub decisions: Vec<Decision>,
    /// Per decision, in decision order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<Vec<Vec<Snapshot>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

async fn sample_decisions(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SampleApiRequest>, JsonRejection>,
) -> ApiResult<Json<SampleApiResponse>> {
    let Json(req) = body?;
    let triple = match (req.triple, &req.session_id) {
        (Some(t), _) => t.resolve()?,
        (None, Some(id)) => state
            .sessions()
            .get(id)
            .map(|s| s.triple.clone())
            .ok_or_else(|| unknown_session(id))?,
        (None, None) => return Err(ApiError::bad_request("give a session_id or a triple")),
    };
    if req.count < 1 || req.count > state.config.max_count {
        return Err(ApiError::bad_request(format!(
            "count must be in 1..={}",
            state.config.max_count
        )));
    }
    if !(req.w >= 0.0) || !req.w.is_finite() {
        return Err(ApiError::bad_request("w must be a non-negative number"));
    }
    let served = state.model().ok_or_else(|| {
        ApiError::new(
            StatusCode::CONFLICT,
            "no_model",
            "no model is loaded; POST /api/model/load first",
        )
    })?;
    let capacity = triple.capacity.or(state.config.default_capacity).ok_or_else(|| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "no_capacity",
            "the triple has no capacity and no default is configured",
        )
        .with_detail(json!({ "triple": format_class(&triple) }))
    })?;
    let class = CapacityClass::from_throughput(capacity);
    let request_id = state.requests.fetch_add(1, Ordering::Relaxed);
    let seed = req.seed.unwrap_or_else(|| 0x5eed_0000_0000 ^ request_id);
    let steps = req.snapshots.clone().unwrap_or_default();
    if let Some(&bad) = steps.iter().find(|&&t| t > served.schedule.steps()) {
        return Err(ApiError::bad_request(format!(
            "snapshot step {bad} beyond T = {}",
            served.schedule.steps()
        )));
    }
    let constraints = decide::Constraints::new(
        &triple,
        class,
        served.reference(),
        served.model.meta.human_types,
        state.config.objectives,
    );
    let count = req.count;
    let sampled = count * state.config.oversample.max(1);
    let w = req.w;
    let (decisions, snapshots) = tokio::task::spawn_blocking(move || {
        let meta = &served.model.meta;
        let out = sample(
            &served.model,
            &served.schedule,
            &SampleRequest {
                class,
                w,
                count: sampled,
                seed,
                snapshot_steps: steps,
            },
            &meta.codec,
            &meta.bounds,
        )?;
        let decisions = decide::select(&constraints, out.configs, count);
        let snapshots = (!out.snapshots.is_empty()).then(|| {
            decisions
                .iter()
                .map(|d| out.snapshots[d.id as usize].clone())
                .collect::<Vec<_>>()
        });
        Ok::<_, gms_core::Error>((decisions, snapshots))
    })
    .await?
    .map_err(|e| ApiError::bad_request(e.to_string()))?;

    if let Some(id) = &req.session_id {
        if let Some(s) = state.sessions().get_mut(id) {
            s.record_decisions(&decisions.iter().map(|d| d.id).collect::<Vec<_>>());
        }
    }
    let note = decisions
        .is_empty()
        .then(|| "no feasible sample: every draw violated the machine ceiling or the skill requirement".to_string());
    Ok(Json(SampleApiResponse {
        triple: format_class(&triple),
        class,
        seed,
        sampled,
        decisions,
        snapshots,
        note,
    }))
}

async fn model_descriptor(State(state): State<Arc<AppState>>) -> ApiResult<Json<ModelDescriptor>> {
    state
        .model()
        .map(|m| Json(m.descriptor()))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_model", "no model is loaded"))
}

#[derive(Debug, Deserialize)]
pub struct LoadRequest {
    pub path: PathBuf,
}

fn checkpoint_error(e: CheckpointError, path: &std::path::Path) -> ApiError {
    let detail = json!({ "path": path.display().to_string() });
    match e {
        CheckpointError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            ApiError::new(StatusCode::NOT_FOUND, "not_found", "checkpoint file does not exist").with_detail(detail)
        }
        other => ApiError::new(StatusCode::BAD_REQUEST, "bad_checkpoint", other.to_string()).with_detail(detail),
    }
}

/// Load and validate off the request thread, then swap the snapshot in one
/// write; requests that already hold the old snapshot finish on it.
async fn load_model(
    State(state): State<Arc<AppState>>,
    body: Result<Json<LoadRequest>, JsonRejection>,
) -> ApiResult<Json<ModelDescriptor>> {
    let Json(req) = body?;
    let path = req.path.clone();
    let served = tokio::task::spawn_blocking(move || {
        let (denoiser, meta): (_, CheckpointMeta) =
            checkpoint::load::<f32>(&path).map_err(|e| checkpoint_error(e, &path))?;
        ServedModel::new(TrainedModel { denoiser, meta }, Some(path.clone())).map_err(|m| {
            ApiError::new(StatusCode::BAD_REQUEST, "bad_checkpoint", m)
                .with_detail(json!({ "path": path.display().to_string() }))
        })
    })
    .await??;
    let descriptor = served.descriptor();
    state.install(served);
    Ok(Json(descriptor))
}
