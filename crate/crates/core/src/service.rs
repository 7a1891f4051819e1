//! HTTP JSON chat service: sessions, grounded messages, health and config.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::corpus::{CorpusMode, License};
use crate::costing::PricingTable;
use crate::embed::{EmbedConfig, MockEmbedder, RemoteEmbedder};
use crate::index::{IndexError, VectorIndex};
use crate::llm::{CompletionConfig, EchoCompleter, OpenAiChatClient};
use crate::rag::{generate, Backends, ChatSession, GenerationPolicy, GroundedAnswer, PromptTemplate, RagError};
use crate::retry::Secret;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("index {path}: {source}")]
    Index { path: PathBuf, source: IndexError },
    #[error("server error: {0}")]
    Server(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexPaths {
    pub basic: Option<PathBuf>,
    pub research: Option<PathBuf>,
}

impl IndexPaths {
    pub fn iter(&self) -> impl Iterator<Item = (CorpusMode, &Path)> {
        [(CorpusMode::Basic, &self.basic), (CorpusMode::Research, &self.research)]
            .into_iter()
            .filter_map(|(m, p)| p.as_deref().map(|p| (m, p)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedBackend {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSettings {
    pub backend: EmbedBackend,
    pub endpoint: String,
    pub model_id: String,
    pub batch_size: usize,
    /// Dimension of the mock embedder; ignored by the remote backend.
    pub mock_dim: usize,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        let remote = EmbedConfig::default();
        Self {
            backend: EmbedBackend::Remote,
            endpoint: remote.endpoint,
            model_id: remote.model_id,
            batch_size: remote.batch_size,
            mock_dim: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompletionBackend {
    Remote,
    Echo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionSettings {
    pub backend: CompletionBackend,
    pub endpoint: String,
    pub model_id: String,
    pub temperature: f64,
}

impl Default for CompletionSettings {
    fn default() -> Self {
        let policy = GenerationPolicy::default();
        Self {
            backend: CompletionBackend::Remote,
            endpoint: CompletionConfig::default().endpoint,
            model_id: policy.model_id,
            temperature: policy.temperature,
        }
    }
}

/// Service configuration, loadable from TOML. Holds the *name* of the
/// environment variable with the API key, never the key itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub indices: IndexPaths,
    pub embed: EmbedSettings,
    pub completion: CompletionSettings,
    pub api_key_env: String,
    pub pricing: PricingTable,
    pub session_ttl_secs: u64,
    pub max_sessions: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            indices: IndexPaths::default(),
            embed: EmbedSettings::default(),
            completion: CompletionSettings::default(),
            api_key_env: "OPENAI_API_KEY".into(),
            pricing: PricingTable::default(),
            session_ttl_secs: 3600,
            max_sessions: 1000,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn generation_policy(&self) -> GenerationPolicy {
        GenerationPolicy {
            model_id: self.completion.model_id.clone(),
            temperature: self.completion.temperature,
            ..GenerationPolicy::default()
        }
    }

    pub fn session_ttl(&self) -> Duration {
        Duration::from_secs(self.session_ttl_secs)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.indices.iter().next().is_none() {
            return Err(ConfigError::Invalid("no index path configured".into()));
        }
        if self.session_ttl_secs == 0 {
            return Err(ConfigError::Invalid("session_ttl_secs must be positive".into()));
        }
        if self.max_sessions == 0 {
            return Err(ConfigError::Invalid("max_sessions must be positive".into()));
        }
        if self.embed.batch_size == 0 || self.embed.mock_dim == 0 {
            return Err(ConfigError::Invalid("embed batch_size and mock_dim must be positive".into()));
        }
        self.pricing
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.generation_policy()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    fn api_key(&self) -> Secret {
        Secret::new(std::env::var(&self.api_key_env).unwrap_or_default())
    }

    /// Model clients described by the config.
    pub fn backends(&self) -> Result<Backends, ConfigError> {
        let key = self.api_key();
        let needs_key = self.embed.backend == EmbedBackend::Remote
            || self.completion.backend == CompletionBackend::Remote;
        if needs_key && key.is_empty() {
            tracing::warn!(var = %self.api_key_env, "API key environment variable is unset or empty");
        }
        let embedder: Arc<dyn crate::embed::Embedder> = match self.embed.backend {
            EmbedBackend::Mock => Arc::new(MockEmbedder::new(self.embed.mock_dim)),
            EmbedBackend::Remote => Arc::new(
                RemoteEmbedder::new(EmbedConfig {
                    endpoint: self.embed.endpoint.clone(),
                    model_id: self.embed.model_id.clone(),
                    api_key: key.clone(),
                    batch_size: self.embed.batch_size,
                    ..EmbedConfig::default()
                })
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
        };
        let completer: Arc<dyn crate::llm::ChatCompleter> = match self.completion.backend {
            CompletionBackend::Echo => Arc::new(EchoCompleter::new(vec![
                PromptTemplate::basic().refusal_sentence,
                PromptTemplate::research().refusal_sentence,
            ])),
            CompletionBackend::Remote => Arc::new(
                OpenAiChatClient::new(CompletionConfig {
                    endpoint: self.completion.endpoint.clone(),
                    api_key: key,
                    ..CompletionConfig::default()
                })
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
        };
        Ok(Backends { embedder, completer })
    }
}

struct SessionSlot {
    session: Arc<tokio::sync::Mutex<ChatSession>>,
    last_used: Instant,
}

/// Shared service state: read-only indices, in-memory sessions.
pub struct AppState {
    config: ServiceConfig,
    backends: Backends,
    policy: GenerationPolicy,
    ttl: Duration,
    indices: RwLock<HashMap<CorpusMode, Arc<VectorIndex>>>,
    sessions: Mutex<HashMap<Uuid, SessionSlot>>,
}

impl AppState {
    pub fn new(config: ServiceConfig, backends: Backends) -> Self {
        Self {
            policy: config.generation_policy(),
            ttl: config.session_ttl(),
            config,
            backends,
            indices: RwLock::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    /// Overrides the configured session TTL.
    pub fn with_ttl(mut self, ttl: Duration) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn load_index(&self, index: VectorIndex) {
        let mode = index.mode();
        tracing::info!(%mode, entries = index.len(), model = %index.metadata().model_id, "index loaded");
        self.indices.write().unwrap().insert(mode, Arc::new(index));
    }

    pub fn index(&self, mode: CorpusMode) -> Option<Arc<VectorIndex>> {
        self.indices.read().unwrap().get(&mode).cloned()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// Drops sessions idle for longer than the TTL; returns how many.
    pub fn evict_expired(&self) -> usize {
        let mut sessions = self.sessions.lock().unwrap();
        let before = sessions.len();
        let ttl = self.ttl;
        sessions.retain(|_, slot| slot.last_used.elapsed() <= ttl);
        before - sessions.len()
    }

    fn create_session(&self, mode: CorpusMode) -> Result<ChatSession, ApiError> {
        if self.index(mode).is_none() {
            return Err(ApiError::bad_request(format!("mode {mode} has no loaded index")));
        }
        self.evict_expired();
        let mut sessions = self.sessions.lock().unwrap();
        if sessions.len() >= self.config.max_sessions {
            return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "session capacity reached"));
        }
        let session = ChatSession::new(mode);
        sessions.insert(
            session.session_id,
            SessionSlot {
                session: Arc::new(tokio::sync::Mutex::new(session.clone())),
                last_used: Instant::now(),
            },
        );
        Ok(session)
    }

    fn touch_session(&self, id: Uuid) -> Option<Arc<tokio::sync::Mutex<ChatSession>>> {
        let mut sessions = self.sessions.lock().unwrap();
        let slot = sessions.get_mut(&id)?;
        if slot.last_used.elapsed() > self.ttl {
            sessions.remove(&id);
            return None;
        }
        slot.last_used = Instant::now();
        Some(slot.session.clone())
    }

    pub async fn answer(&self, id: Uuid, text: &str) -> Result<GroundedAnswer, ApiError> {
        let handle = self
            .touch_session(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown or expired session"))?;
        let mut session = handle.lock().await;
        let index = self
            .index(session.mode)
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "index not loaded"))?;
        let template = PromptTemplate::for_mode(session.mode);
        let answer = generate(
            &mut session,
            text,
            &index,
            &self.backends,
            &template,
            &self.policy,
            &self.config.pricing,
        )
        .await?;
        if let Some(slot) = self.sessions.lock().unwrap().get_mut(&id) {
            slot.last_used = Instant::now();
        }
        Ok(answer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub retriable: bool,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: message.into(),
                retriable: false,
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }
}

impl From<RagError> for ApiError {
    fn from(e: RagError) -> Self {
        let status = match &e {
            RagError::EmptyMessage => StatusCode::UNPROCESSABLE_ENTITY,
            e if e.is_upstream() => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "message failed");
        }
        Self {
            status,
            body: ErrorBody {
                retriable: e.is_retriable(),
                error: e.to_string(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub mode: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: Uuid,
    pub mode: CorpusMode,
    pub created_at: String,
}

#[derive(Debug, Deserialize)]
pub struct PostMessage {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceView {
    pub title: String,
    pub uri: String,
    pub license: License,
    pub excerpt: String,
    pub l2_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostView {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub total_usd: f64,
}

/// Wire form of a grounded answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerView {
    pub answer: String,
    pub sources: Vec<SourceView>,
    pub generated_at: String,
    pub cost: CostView,
    pub refused: bool,
}

fn iso_utc(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl From<&GroundedAnswer> for AnswerView {
    fn from(a: &GroundedAnswer) -> Self {
        use rust_decimal::prelude::ToPrimitive;
        Self {
            answer: a.text.clone(),
            sources: a
                .hits
                .iter()
                .map(|h| SourceView {
                    title: h.title.clone(),
                    uri: h.uri.clone(),
                    license: h.license,
                    excerpt: h.text.clone(),
                    l2_distance: h.distance,
                })
                .collect(),
            generated_at: iso_utc(a.generated_at),
            cost: CostView {
                input_tokens: a.cost.input_tokens,
                output_tokens: a.cost.output_tokens,
                total_usd: a.cost.total_usd.to_f64().unwrap_or(f64::NAN),
            },
            refused: a.refused,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub modes_loaded: Vec<CorpusMode>,
    pub index_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
struct ConfigView<'a> {
    #[serde(flatten)]
    config: &'a ServiceConfig,
    api_key_set: bool,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let Json(body) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let mode: CorpusMode = body
        .mode
        .parse()
        .map_err(|_| ApiError::bad_request(format!("unknown mode {:?}", body.mode)))?;
    let session = state.create_session(mode)?;
    tracing::info!(session = %session.session_id, %mode, "session created");
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: session.session_id,
            mode,
            created_at: iso_utc(session.created_at),
        }),
    ))
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<PostMessage>, JsonRejection>,
) -> Result<Json<AnswerView>, ApiError> {
    let id = Uuid::parse_str(&id)
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "unknown or expired session"))?;
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    if body.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "text is empty"));
    }
    let started = Instant::now();
    let answer = state.answer(id, &body.text).await?;
    tracing::info!(session = %id, hits = answer.hits.len(), refused = answer.refused, elapsed_ms = started.elapsed().as_millis() as u64, "message answered");
    Ok(Json(AnswerView::from(&answer)))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let indices = state.indices.read().unwrap();
    let mut modes_loaded: Vec<CorpusMode> = indices.keys().copied().collect();
    modes_loaded.sort();
    let index_counts = indices
        .iter()
        .map(|(m, i)| (m.as_str().to_string(), i.len()))
        .collect();
    Json(Health {
        status: "ok".into(),
        modes_loaded,
        index_counts,
    })
}

async fn config(State(state): State<Arc<AppState>>) -> Response {
    let view = ConfigView {
        config: &state.config,
        api_key_set: !state.config.api_key().is_empty(),
    };
    Json(view).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/health", get(health))
        .route("/config", get(config))
        .with_state(state)
}

/// Serves on `listener` until `shutdown` resolves, then drains in-flight
/// requests. Expired sessions are swept in the background.
pub async fn run(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = {
        let state = state.clone();
        let period = state.ttl.clamp(Duration::from_millis(100), Duration::from_secs(60));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                let evicted = state.evict_expired();
                if evicted > 0 {
                    tracing::debug!(evicted, "expired sessions evicted");
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

/// Loads every configured index into a fresh state.
pub fn build_state(config: ServiceConfig) -> Result<AppState, StartupError> {
    config.validate()?;
    let backends = config.backends()?;
    let mut loaded = Vec::new();
    for (mode, path) in config.indices.iter() {
        let index = VectorIndex::load(path).map_err(|source| StartupError::Index {
            path: path.to_path_buf(),
            source,
        })?;
        if index.mode() != mode {
            return Err(StartupError::Index {
                path: path.to_path_buf(),
                source: IndexError::Validation(format!(
                    "configured as {mode} but built for {}",
                    index.mode()
                )),
            });
        }
        if index.metadata().model_id != backends.embedder.model_id() {
            tracing::warn!(%mode, index_model = %index.metadata().model_id, embed_model = %backends.embedder.model_id(), "index was built with a different embedding model");
        }
        loaded.push(index);
    }
    let state = AppState::new(config, backends);
    for index in loaded {
        state.load_index(index);
    }
    Ok(state)
}

pub async fn serve(config: ServiceConfig) -> Result<(), StartupError> {
    let bind = config.bind;
    let state = Arc::new(build_state(config)?);
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    run(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    })
    .await?;
    Ok(())
}
