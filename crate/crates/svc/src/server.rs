//! HTTP service over a read-only bank snapshot.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use procmem_core::bank::{Bank, BankSnapshot};
use procmem_core::embed::{Embedder, EmbeddingService};
use procmem_core::extract::{
    extract_state, ExtractOutcome, ExtractionRequest, ExtractorConfig, ImageData, VlmClient,
};
use procmem_core::schema::{HistoryEntry, ProceduralState};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::config::ServiceConfig;
use crate::error::{Class, Failure};
use crate::ops;

/// Everything a request needs, swapped atomically on (re)load.
pub struct Loaded {
    pub snapshot: Arc<BankSnapshot>,
    pub embedder: Arc<EmbeddingService>,
    pub vlm: Option<Arc<dyn VlmClient>>,
    pub extractor: ExtractorConfig,
}

pub struct AppState {
    config: ServiceConfig,
    loaded: RwLock<Option<Arc<Loaded>>>,
}

impl AppState {
    /// Starts in the loading state; requests get 503 until [`load`](Self::load).
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            loaded: RwLock::new(None),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Opens the bank and builds clients. Blocking.
    pub fn load(&self) -> Result<(), Failure> {
        let loaded = load(&self.config)?;
        *self.loaded.write().expect("lock poisoned") = Some(Arc::new(loaded));
        Ok(())
    }

    /// Drops the current snapshot; requests get 503 until the next `load`.
    pub fn begin_reload(&self) {
        *self.loaded.write().expect("lock poisoned") = None;
    }

    pub fn current(&self) -> Option<Arc<Loaded>> {
        self.loaded.read().expect("lock poisoned").clone()
    }
}

pub fn load(config: &ServiceConfig) -> Result<Loaded, Failure> {
    config.check()?;
    let bank = Bank::open(&config.bank)?;
    let embedder = config.embedding_service()?;
    if embedder.model_id() != bank.manifest().embed_model_id {
        return Err(Failure::new(
            "bank",
            "EmbedModelMismatch",
            Class::Operational,
            format!(
                "bank expects embedding model {:?}, configured embedder is {:?}",
                bank.manifest().embed_model_id,
                embedder.model_id()
            ),
        ));
    }
    Ok(Loaded {
        snapshot: Arc::new(bank.snapshot()?),
        embedder: Arc::new(embedder),
        vlm: config.extractor.client()?,
        extractor: config.extractor.config()?,
    })
}

struct ApiError(StatusCode, Failure);

impl From<Failure> for ApiError {
    fn from(f: Failure) -> Self {
        let status = match f.class {
            Class::Contract => StatusCode::BAD_REQUEST,
            Class::Upstream => StatusCode::BAD_GATEWAY,
            Class::Operational => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, f)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn unavailable() -> ApiError {
    ApiError(
        StatusCode::SERVICE_UNAVAILABLE,
        Failure::new("svc", "Loading", Class::Operational, "bank is loading"),
    )
}

fn ready(state: &AppState) -> Result<Arc<Loaded>, ApiError> {
    state.current().ok_or_else(unavailable)
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| Failure::new("svc", "InvalidBody", Class::Contract, e.to_string()).into())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Failure> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::from(Failure::new("svc", "Join", Class::Operational, e.to_string())))?
        .map_err(ApiError::from)
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.current() {
        Some(l) => Json(json!({
            "status": "ok",
            "memories": l.snapshot.len(),
            "embed_model_id": l.snapshot.manifest.embed_model_id,
        }))
        .into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
    }
}

#[derive(Debug, Serialize)]
pub struct MemorySummary {
    pub task_id: String,
    pub adapter_ref: String,
    pub states: Vec<ProceduralState>,
    pub rank: Option<usize>,
    pub scaling_alpha: Option<f64>,
    pub layers: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct MemoriesReply {
    pub embed_model_id: String,
    pub count: usize,
    pub base_adapter_ref: Option<String>,
    pub memories: Vec<MemorySummary>,
}

pub fn memories_reply(snapshot: &BankSnapshot) -> MemoriesReply {
    let memories = snapshot
        .manifest
        .memories
        .iter()
        .map(|m| {
            let set = snapshot.adapters.get(&m.task_id);
            MemorySummary {
                task_id: m.task_id.clone(),
                adapter_ref: m.adapter_ref.clone(),
                states: m.states.clone(),
                rank: set.map(|s| s.rank()),
                scaling_alpha: set.map(|s| s.scaling_alpha()),
                layers: set.map(|s| s.layers().map(|l| l.name.to_string()).collect()).unwrap_or_default(),
            }
        })
        .collect();
    MemoriesReply {
        embed_model_id: snapshot.manifest.embed_model_id.clone(),
        count: snapshot.manifest.memories.len(),
        base_adapter_ref: snapshot.manifest.base_adapter_ref.clone(),
        memories,
    }
}

async fn memories(State(state): State<Arc<AppState>>) -> ApiResult<MemoriesReply> {
    let loaded = ready(&state)?;
    Ok(Json(memories_reply(&loaded.snapshot)))
}

#[derive(Debug, Deserialize)]
struct RetrieveBody {
    state: Value,
    k: Option<usize>,
    temperature: Option<f64>,
}

async fn retrieve(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Value> {
    let loaded = ready(&state)?;
    let body: RetrieveBody = parse_body(&body)?;
    let query = ProceduralState::from_json_value(&body.state).map_err(Failure::from)?;
    let d = &state.config.defaults;
    let (k, temperature, mode) = (body.k.unwrap_or(d.k), body.temperature.unwrap_or(d.temperature), d.mode);
    let retrieval = blocking(move || {
        ops::retrieve(&loaded.snapshot, loaded.embedder.as_ref(), &query, k, temperature, mode)
    })
    .await?;
    Ok(Json(serde_json::to_value(retrieval).expect("serializable")))
}

async fn fuse(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<ops::Artifact> {
    let loaded = ready(&state)?;
    let plan = parse_body::<ops::FuseRequest>(&body)?.into_plan(state.config.defaults.mode)?;
    let dir = state.config.artifacts_dir();
    let artifact = blocking(move || {
        let fused = ops::fuse_plan(&loaded.snapshot, &plan)?;
        ops::write_artifact(&fused, &dir)
    })
    .await?;
    Ok(Json(artifact))
}

#[derive(Debug, Deserialize)]
struct ExtractBody {
    image_b64: String,
    #[serde(default = "default_media_type")]
    media_type: String,
    instruction: String,
    #[serde(default)]
    history: Vec<HistoryEntry>,
}

fn default_media_type() -> String {
    "image/png".into()
}

#[derive(Debug, Serialize)]
struct ExtractReply {
    /// `null` when the fallback asked for base parameters.
    state: Option<ProceduralState>,
    #[serde(flatten)]
    outcome: ExtractOutcome,
}

async fn extract(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<ExtractReply> {
    let loaded = ready(&state)?;
    let body: ExtractBody = parse_body(&body)?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(body.image_b64.trim())
        .map_err(|e| Failure::new("extract", "InvalidRequest", Class::Contract, format!("image_b64: {e}")))?;
    let request = ExtractionRequest::new(ImageData::new(body.media_type, bytes), body.instruction, body.history)
        .map_err(Failure::from)?;
    let vlm = loaded.vlm.clone().ok_or_else(|| {
        Failure::new("extract", "EndpointUnavailable", Class::Upstream, "no extractor endpoint configured")
    })?;
    let outcome = blocking(move || Ok(extract_state(&request, &loaded.extractor, vlm.as_ref())?)).await?;
    Ok(Json(ExtractReply {
        state: outcome.state().cloned(),
        outcome,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/memories", get(memories))
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/fuse", post(fuse))
        .route("/v1/extract", post(extract))
        .with_state(state)
}

/// Binds, starts loading the bank in the background and serves until
/// `shutdown` resolves.
pub async fn serve(
    state: Arc<AppState>,
    listener: TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match loader.load() {
        Ok(()) => tracing::info!("bank loaded"),
        Err(e) => tracing::error!(error = %e, "bank failed to load"),
    });
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// A server on its own runtime thread; stops when dropped.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    /// Serves `state` without loading it; call `state.load()` when ready.
    pub fn start(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let listener = runtime.block_on(TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let _ = axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr,
            stop: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
