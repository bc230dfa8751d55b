//! Embedding service: users post a profile once, then ask for anchored
//! embeddings under any number of scenario queries. Prefix caches live
//! in an LRU keyed by user id.

use std::collections::HashMap;
use std::future::Future;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use qanchor::api::{EmbedRequest, EmbedResponse, ErrorBody, PrefixResponse, ProfileRequest, RefreshRequest, Stats};
use qanchor::model::QAnchor;
use qanchor::serve::{build_prefix, embed_query, embed_uncached_counted, refresh_prefix, PrefixEntry};
use qanchor::tune::{SoftPrompt, TunedArtifacts};
use qanchor::Error;
use tokio::net::TcpListener;

const LOCK_STRIPES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    pub capacity: usize,
    pub cache: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            capacity: 10_000,
            cache: true,
        }
    }
}

#[derive(Default)]
struct Counters {
    profiles: AtomicU64,
    embeds: AtomicU64,
    refreshes: AtomicU64,
    cache_misses: AtomicU64,
    evictions: AtomicU64,
    errors: AtomicU64,
    tokens_processed: AtomicU64,
}

pub struct AppState {
    model: Arc<QAnchor>,
    prompts: HashMap<String, Arc<SoftPrompt>>,
    cfg: ServerConfig,
    cache: Mutex<LruCache<String, Arc<PrefixEntry>>>,
    // Per-user serialization without an unbounded map of locks.
    stripes: Vec<tokio::sync::Mutex<()>>,
    counters: Counters,
}

impl AppState {
    pub fn new(model: QAnchor, cfg: ServerConfig) -> Self {
        let cap = NonZeroUsize::new(cfg.capacity.max(1)).expect("nonzero");
        Self {
            model: Arc::new(model),
            prompts: HashMap::new(),
            cache: Mutex::new(LruCache::new(cap)),
            stripes: (0..LOCK_STRIPES).map(|_| tokio::sync::Mutex::new(())).collect(),
            cfg,
            counters: Counters::default(),
        }
    }

    /// Registers a tuned prompt under its scenario name.
    pub fn with_prompt(mut self, artifacts: TunedArtifacts) -> Self {
        self.prompts.insert(artifacts.scenario, Arc::new(artifacts.prompt));
        self
    }

    pub fn model(&self) -> &QAnchor {
        &self.model
    }

    fn stripe(&self, user_id: &str) -> &tokio::sync::Mutex<()> {
        let mut h = DefaultHasher::new();
        user_id.hash(&mut h);
        &self.stripes[h.finish() as usize % LOCK_STRIPES]
    }

    fn get(&self, user_id: &str) -> Option<Arc<PrefixEntry>> {
        self.cache.lock().expect("cache lock").get(user_id).cloned()
    }

    fn put(&self, entry: PrefixEntry) {
        let key = entry.user_id.clone();
        let evicted = self.cache.lock().expect("cache lock").push(key.clone(), Arc::new(entry));
        if matches!(evicted, Some((k, _)) if k != key) {
            self.counters.evictions.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn stats(&self) -> Stats {
        let c = &self.counters;
        let mut scenarios: Vec<String> = self.prompts.keys().cloned().collect();
        scenarios.sort();
        Stats {
            entries: self.cache.lock().expect("cache lock").len(),
            capacity: self.cfg.capacity,
            cache_enabled: self.cfg.cache,
            profiles: c.profiles.load(Ordering::Relaxed),
            embeds: c.embeds.load(Ordering::Relaxed),
            refreshes: c.refreshes.load(Ordering::Relaxed),
            cache_misses: c.cache_misses.load(Ordering::Relaxed),
            evictions: c.evictions.load(Ordering::Relaxed),
            errors: c.errors.load(Ordering::Relaxed),
            tokens_processed: c.tokens_processed.load(Ordering::Relaxed),
            scenarios,
        }
    }
}

/// An error response with a JSON body.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::CacheMiss(_) => (StatusCode::NOT_FOUND, "cache_miss"),
            Error::Stale(_) => (StatusCode::CONFLICT, "stale"),
            Error::Capacity { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "capacity"),
            Error::Contract(_)
            | Error::DegenerateInput(_)
            | Error::Dimension(_)
            | Error::Index(_)
            | Error::Config(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), "malformed_request", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

fn counted<T>(state: &AppState, r: std::result::Result<T, ApiError>) -> std::result::Result<T, ApiError> {
    if r.is_err() {
        state.counters.errors.fetch_add(1, Ordering::Relaxed);
    }
    r
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> qanchor::Result<T> + Send + 'static) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
    }
}

fn check_user_id(user_id: &str) -> Result<(), ApiError> {
    if user_id.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", "user_id is empty"));
    }
    Ok(())
}

async fn post_profile(
    State(state): State<Arc<AppState>>,
    req: Result<Json<ProfileRequest>, JsonRejection>,
) -> ApiResult<PrefixResponse> {
    let r = async {
        let Json(req) = req?;
        check_user_id(&req.user_id)?;
        let mut profile = req.profile;
        if profile.user_id.is_empty() {
            profile.user_id = req.user_id.clone();
        } else if profile.user_id != req.user_id {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "invalid_request",
                format!("profile belongs to {} not {}", profile.user_id, req.user_id),
            ));
        }
        let _guard = state.stripe(&req.user_id).lock().await;
        let model = state.model.clone();
        let entry = blocking(move || build_prefix(&model, &profile)).await?;
        let l_p = entry.l_p;
        state.put(entry);
        state.counters.profiles.fetch_add(1, Ordering::Relaxed);
        Ok(Json(PrefixResponse {
            user_id: req.user_id,
            l_p,
        }))
    }
    .await;
    counted(&state, r)
}

async fn post_embed(
    State(state): State<Arc<AppState>>,
    req: Result<Json<EmbedRequest>, JsonRejection>,
) -> ApiResult<EmbedResponse> {
    let r = async {
        let Json(req) = req?;
        check_user_id(&req.user_id)?;
        let prompt = match &req.scenario {
            None => None,
            Some(s) => Some(state.prompts.get(s).cloned().ok_or_else(|| {
                ApiError::new(StatusCode::NOT_FOUND, "unknown_scenario", format!("no tuned prompt for {s}"))
            })?),
        };
        let _guard = state.stripe(&req.user_id).lock().await;
        let entry = state.get(&req.user_id).ok_or_else(|| {
            state.counters.cache_misses.fetch_add(1, Ordering::Relaxed);
            ApiError::from(Error::CacheMiss(req.user_id.clone()))
        })?;
        let model = state.model.clone();
        let cache = state.cfg.cache;
        let (embedding, cost) = blocking(move || {
            let p = prompt.as_deref();
            if cache {
                embed_query(&model, &entry, &req.query, p)
            } else {
                embed_uncached_counted(&model, &entry.profile, &req.query, p)
            }
        })
        .await?;
        state.counters.embeds.fetch_add(1, Ordering::Relaxed);
        state
            .counters
            .tokens_processed
            .fetch_add(cost.tokens_processed as u64, Ordering::Relaxed);
        Ok(Json(EmbedResponse {
            embedding,
            tokens_processed: cost.tokens_processed,
            attention_pairs: cost.attention_pairs,
            cached: cost.cached,
        }))
    }
    .await;
    counted(&state, r)
}

async fn post_refresh(
    State(state): State<Arc<AppState>>,
    req: Result<Json<RefreshRequest>, JsonRejection>,
) -> ApiResult<PrefixResponse> {
    let r = async {
        let Json(req) = req?;
        check_user_id(&req.user_id)?;
        let _guard = state.stripe(&req.user_id).lock().await;
        let entry = state.get(&req.user_id).ok_or_else(|| {
            state.counters.cache_misses.fetch_add(1, Ordering::Relaxed);
            ApiError::from(Error::CacheMiss(req.user_id.clone()))
        })?;
        let model = state.model.clone();
        let events = req.events;
        let fresh = blocking(move || refresh_prefix(&model, &entry, &events)).await?;
        let l_p = fresh.l_p;
        state.put(fresh);
        state.counters.refreshes.fetch_add(1, Ordering::Relaxed);
        Ok(Json(PrefixResponse {
            user_id: req.user_id,
            l_p,
        }))
    }
    .await;
    counted(&state, r)
}

async fn get_stats(State(state): State<Arc<AppState>>) -> Json<Stats> {
    Json(state.stats())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/profile", post(post_profile))
        .route("/v1/embed", post(post_embed))
        .route("/v1/refresh", post(post_refresh))
        .route("/v1/stats", get(get_stats))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr()?, "serving");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// A server on an ephemeral local port, stopped when the handle drops.
pub struct LocalServer {
    pub addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    task: Option<tokio::task::JoinHandle<std::io::Result<()>>>,
}

impl LocalServer {
    pub async fn start(state: Arc<AppState>) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel();
        let task = tokio::spawn(serve(listener, state, async {
            let _ = rx.await;
        }));
        Ok(Self {
            addr,
            stop: Some(tx),
            task: Some(task),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.task.take() {
            Some(t) => t.await.map_err(std::io::Error::other)?,
            None => Ok(()),
        }
    }
}

impl Drop for LocalServer {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
    }
}
