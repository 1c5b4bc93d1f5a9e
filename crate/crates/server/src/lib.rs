//! HTTP environment service: episodes and reward scoring under `/v1`.
//!
//! Sessions live in memory and expire after a fixed TTL. Each session runs
//! at most one step at a time; a concurrent step receives 409.

use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, TryLockError};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tarenv_core::episode::{decode_image, Episode, EpisodeConfig, EpisodeState, Transcript};
use tarenv_core::model::encode_png;
use tarenv_core::protocol::ActionFormat;
use tarenv_core::question::{lettered, ChoiceOption};
use tarenv_core::reward::{RewardBreakdown, RewardRequest};

pub const API_VERSION: &str = "v1";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub episode: EpisodeConfig,
    pub ttl: Duration,
    /// Base directory for images referenced by path.
    pub image_root: Option<PathBuf>,
    /// When set, annotated images of path-created episodes are also written here.
    pub workdir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            episode: EpisodeConfig::default(),
            ttl: Duration::from_secs(600),
            image_root: None,
            workdir: None,
        }
    }
}

pub struct Session {
    pub episode: Mutex<Episode>,
    created_at: Instant,
    from_path: bool,
}

pub struct AppState {
    config: ServerConfig,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
}

impl AppState {
    pub fn new(config: ServerConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    fn table(&self) -> std::sync::MutexGuard<'_, HashMap<String, Arc<Session>>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Live session by id; expired sessions are dropped and reported absent.
    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        let mut table = self.table();
        let s = table.get(id)?.clone();
        if s.created_at.elapsed() >= self.config.ttl {
            table.remove(id);
            return None;
        }
        Some(s)
    }

    /// Removes every expired session and returns how many were dropped.
    pub fn sweep(&self) -> usize {
        let ttl = self.config.ttl;
        let mut table = self.table();
        let before = table.len();
        table.retain(|_, s| s.created_at.elapsed() < ttl);
        before - table.len()
    }

    pub fn len(&self) -> usize {
        self.table().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            field: None,
        }
    }

    fn bad_request(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: Some(field.into()),
            ..Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no live episode `{id}`"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut err = json!({"code": self.code, "message": self.message});
        if let Some(f) = self.field {
            err["field"] = json!(f);
        }
        (self.status, Json(json!({ "error": err }))).into_response()
    }
}

/// Deserializes a body, naming the offending field on failure.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { String::new() } else { path };
        ApiError::bad_request(field, e.inner().to_string())
    })
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum OptionsInput {
    Texts(Vec<String>),
    Lettered(Vec<ChoiceOption>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateEpisode {
    /// Base64-encoded image (PNG, JPEG, ...).
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub image_path: Option<String>,
    pub question: String,
    pub options: OptionsInput,
    #[serde(default)]
    pub ground_truth: Option<String>,
    #[serde(default)]
    pub format: Option<ActionFormat>,
    /// Base64 image returned in place of the drawn marks.
    #[serde(default)]
    pub annotation_override: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Created {
    pub episode_id: String,
    pub state: EpisodeState,
    pub format: ActionFormat,
    pub system_prompt: String,
    pub user_text: String,
    pub expires_in_s: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    pub agent_text: String,
}

#[derive(Debug, Serialize)]
pub struct StepResponse {
    pub feedback: String,
    pub done: bool,
    pub final_answer: Option<String>,
    pub parse_ok: bool,
    pub state: EpisodeState,
    /// Base64 PNG of the annotated image, when the step produced one.
    pub updated_image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub updated_image_path: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct EpisodeView {
    pub episode_id: String,
    pub state: EpisodeState,
    pub format: ActionFormat,
    pub question: String,
    pub options: Vec<ChoiceOption>,
    pub final_answer: Option<String>,
    pub transcript: Transcript,
}

fn b64() -> base64::engine::GeneralPurpose {
    base64::engine::general_purpose::STANDARD
}

fn decode_b64_image(field: &str, data: &str) -> Result<Vec<u8>, ApiError> {
    let payload = data.split_once(";base64,").map_or(data, |(_, p)| p);
    b64()
        .decode(payload.trim())
        .map_err(|e| ApiError::bad_request(field, format!("invalid base64: {e}")))
}

fn resolve(root: Option<&Path>, p: &str) -> PathBuf {
    match root {
        Some(r) if Path::new(p).is_relative() => r.join(p),
        _ => PathBuf::from(p),
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "api": API_VERSION,
    }))
}

async fn create_episode(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let req: CreateEpisode = parse_body(&body)?;
    let (bytes, from_path) = match (&req.image, &req.image_path) {
        (Some(data), None) => (decode_b64_image("image", data)?, false),
        (None, Some(p)) => {
            let path = resolve(state.config.image_root.as_deref(), p);
            let bytes =
                fs::read(&path).map_err(|e| ApiError::bad_request("image_path", format!("{}: {e}", path.display())))?;
            (bytes, true)
        }
        _ => {
            return Err(ApiError::bad_request(
                "image",
                "give exactly one of `image` and `image_path`",
            ))
        }
    };
    let options = match req.options {
        OptionsInput::Texts(t) => lettered(t),
        OptionsInput::Lettered(o) => o,
    };
    let mut config = state.config.episode.clone();
    if let Some(f) = req.format {
        config.format = f;
    }
    let format = config.format;
    let id = uuid::Uuid::new_v4().to_string();
    let mut episode = Episode::from_image_bytes(
        id.clone(),
        &bytes,
        req.question,
        options,
        req.ground_truth,
        Arc::new(config),
    )
    .map_err(|e| match e {
        tarenv_core::episode::EpisodeError::Options(o) => ApiError::bad_request("options", o.to_string()),
        other => ApiError::bad_request("image", other.to_string()),
    })?;
    if let Some(data) = &req.annotation_override {
        let img = decode_image(&decode_b64_image("annotation_override", data)?)
            .map_err(|e| ApiError::bad_request("annotation_override", e.to_string()))?;
        episode
            .override_annotation(img)
            .map_err(|e| ApiError::bad_request("annotation_override", e.to_string()))?;
    }

    let entries = episode.transcript().entries();
    let created = Created {
        episode_id: id.clone(),
        state: episode.state(),
        format,
        system_prompt: entries[0].text.clone(),
        user_text: entries[1].text.clone(),
        expires_in_s: state.config.ttl.as_secs(),
    };
    state.table().insert(
        id,
        Arc::new(Session {
            episode: Mutex::new(episode),
            created_at: Instant::now(),
            from_path,
        }),
    );
    Ok((StatusCode::CREATED, Json(created)))
}

async fn step_episode(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<StepResponse>, ApiError> {
    let req: StepRequest = parse_body(&body)?;
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let workdir = state.config.workdir.clone();
    tokio::task::spawn_blocking(move || step_blocking(&id, &session, &req.agent_text, workdir.as_deref()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map(Json)
}

fn step_blocking(id: &str, session: &Session, text: &str, workdir: Option<&Path>) -> Result<StepResponse, ApiError> {
    let mut episode = match session.episode.try_lock() {
        Ok(g) => g,
        Err(TryLockError::WouldBlock) => {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "busy",
                "another step is in progress for this episode",
            ))
        }
        Err(TryLockError::Poisoned(p)) => p.into_inner(),
    };
    if episode.is_done() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "episode_done",
            "episode has already ended",
        ));
    }
    let resp = episode
        .step(text)
        .map_err(|e| ApiError::new(StatusCode::CONFLICT, "episode_done", e.to_string()))?;
    let png = resp.updated_image.as_ref().map(|img| encode_png(img));
    let mut updated_image_path = None;
    if let (Some(bytes), Some(dir), true) = (&png, workdir, session.from_path) {
        let path = dir.join(format!("{id}.annotated.png"));
        fs::write(&path, bytes).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string()))?;
        updated_image_path = Some(path.display().to_string());
    }
    Ok(StepResponse {
        feedback: resp.feedback,
        done: resp.done,
        final_answer: resp.final_answer,
        parse_ok: resp.parse_ok,
        state: episode.state(),
        updated_image: png.map(|b| b64().encode(b)),
        updated_image_path,
    })
}

async fn get_episode(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<EpisodeView>, ApiError> {
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let ep = match session.episode.try_lock() {
        Ok(g) => g,
        Err(TryLockError::WouldBlock) => {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "busy",
                "a step is in progress for this episode",
            ))
        }
        Err(TryLockError::Poisoned(p)) => p.into_inner(),
    };
    Ok(Json(EpisodeView {
        episode_id: id,
        state: ep.state(),
        format: ep.format(),
        question: ep.question().to_owned(),
        options: ep.options().to_vec(),
        final_answer: ep.final_answer().map(str::to_owned),
        transcript: ep.transcript().clone(),
    }))
}

async fn delete_episode(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<StatusCode, ApiError> {
    state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    state.table().remove(&id);
    Ok(StatusCode::NO_CONTENT)
}

async fn reward(body: Bytes) -> Result<Json<RewardBreakdown>, ApiError> {
    let req: RewardRequest = parse_body(&body)?;
    req.score()
        .map(Json)
        .map_err(|e| ApiError::bad_request("trajectory", e.to_string()))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(state: Arc<AppState>) -> Router {
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/episodes", post(create_episode))
        .route("/episodes/{id}", get(get_episode).delete(delete_episode))
        .route("/episodes/{id}/step", post(step_episode))
        .route("/reward", post(reward));
    Router::new().nest("/v1", v1).fallback(fallback).with_state(state)
}

/// Serves until `shutdown` resolves. Expired sessions are swept periodically.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = {
        let state = state.clone();
        let period = state
            .config
            .ttl
            .clamp(Duration::from_millis(100), Duration::from_secs(60));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                let n = state.sweep();
                if n > 0 {
                    tracing::debug!(expired = n, "swept sessions");
                }
            }
        })
    };
    let result = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    result
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn run(addr: SocketAddr, config: ServerConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve(listener, AppState::new(config), async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
