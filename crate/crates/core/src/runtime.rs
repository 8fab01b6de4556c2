//! Online adaptation loop: per action chunk extract, retrieve, fuse, apply,
//! act, revert, with adapter reuse across chunks of the same stage.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{BankError, BankSnapshot};
use crate::embed::EmbeddingService;
use crate::extract::{
    extract_state, record_step, ExtractError, Extracted, ExtractionRequest, ExtractorConfig,
    FallbackPolicy, ImageData, VlmClient,
};
use crate::fuse::{fuse, FuseError, FusedAdapter, FusionMode, ParameterHost};
use crate::matching::{FusionPlan, MatchError, DEFAULT_TEMPERATURE};
use crate::schema::{HistoryEntry, ProceduralState};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid session configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter host still holds a staged adapter")]
    HostNotIdle,
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Fuse(#[from] FuseError),
    #[error("policy failed: {0}")]
    Policy(String),
    #[error("environment failed: {0}")]
    Environment(String),
    #[error("episode aborted after {} chunk(s): {source}", partial.len())]
    Episode {
        #[source]
        source: Box<RuntimeError>,
        partial: Vec<StepTrace>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: ImageData,
    /// Reference recorded in the history for this frame.
    pub observation_ref: String,
    /// Proprioceptive/feature vector fed to the policy.
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionChunk {
    pub actions: Vec<Vec<f64>>,
}

/// A policy reads weights only through the host, so it sees whatever adapter
/// is currently applied.
pub trait Policy: Send + Sync {
    fn act(&self, host: &ParameterHost, obs: &Observation, instruction: &str) -> Result<ActionChunk, String>;
}

/// `y = W x` on one host layer, repeated `horizon` times.
#[derive(Debug, Clone)]
pub struct LinearPolicy {
    pub layer: String,
    pub horizon: usize,
}

impl Policy for LinearPolicy {
    fn act(&self, host: &ParameterHost, obs: &Observation, _instruction: &str) -> Result<ActionChunk, String> {
        let y = host
            .forward(&self.layer, &obs.features)
            .ok_or_else(|| format!("layer {:?} missing or input has wrong width", self.layer))?;
        Ok(ActionChunk {
            actions: vec![y; self.horizon.max(1)],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvStatus {
    Continue,
    Done,
}

pub trait Environment {
    fn observe(&mut self) -> Result<Observation, String>;
    fn step(&mut self, chunk: &ActionChunk) -> Result<EnvStatus, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub k: usize,
    pub temperature: f64,
    pub fusion_mode: FusionMode,
    /// Merge the bank's base adapter into the host once at session start.
    pub base_merged: bool,
    pub reuse_enabled: bool,
    pub extractor: ExtractorConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            k: 1,
            temperature: DEFAULT_TEMPERATURE,
            fusion_mode: FusionMode::default(),
            base_merged: false,
            reuse_enabled: true,
            extractor: ExtractorConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn check(&self) -> Result<(), RuntimeError> {
        if self.k == 0 {
            return Err(RuntimeError::InvalidConfig("k must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(RuntimeError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        self.extractor.check()?;
        Ok(())
    }
}

/// Per-episode overrides; `None` keeps the session value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeOverrides {
    pub k: Option<usize>,
    pub temperature: Option<f64>,
    pub fusion_mode: Option<FusionMode>,
    pub reuse_enabled: Option<bool>,
    pub fallback_policy: Option<FallbackPolicy>,
}

impl EpisodeOverrides {
    fn apply_to(&self, cfg: &SessionConfig) -> SessionConfig {
        let mut out = cfg.clone();
        if let Some(k) = self.k {
            out.k = k;
        }
        if let Some(t) = self.temperature {
            out.temperature = t;
        }
        if let Some(m) = self.fusion_mode {
            out.fusion_mode = m;
        }
        if let Some(r) = self.reuse_enabled {
            out.reuse_enabled = r;
        }
        if let Some(p) = self.fallback_policy {
            out.extractor.fallback_policy = p;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseTimings {
    pub extract_ms: f64,
    pub retrieve_ms: f64,
    pub fuse_ms: f64,
    pub apply_ms: f64,
    pub act_ms: f64,
    pub revert_ms: f64,
}

impl PhaseTimings {
    pub const NAMES: [&'static str; 6] = ["extract", "retrieve", "fuse", "apply", "act", "revert"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.extract_ms,
            self.retrieve_ms,
            self.fuse_ms,
            self.apply_ms,
            self.act_ms,
            self.revert_ms,
        ]
    }
}

/// Durations of the individual endpoint calls made during one chunk.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ApiCalls {
    pub vlm_call_ms: Vec<f64>,
    pub embed_call_ms: Vec<f64>,
    pub embed_cache_hits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub chunk_index: usize,
    pub extracted: Extracted,
    pub fallback: Option<FallbackPolicy>,
    /// `None` when the chunk ran on base parameters.
    pub plan: Option<FusionPlan>,
    pub reused: bool,
    pub timings: PhaseTimings,
    pub calls: ApiCalls,
}

impl StepTrace {
    /// The trace with all wall-clock measurements cleared.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: PhaseTimings::default(),
            calls: ApiCalls {
                embed_cache_hits: self.calls.embed_cache_hits,
                ..ApiCalls::default()
            },
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeTrace {
    pub steps: Vec<StepTrace>,
    /// Done when the environment finished, Continue when `max_chunks` ran out.
    pub status: EnvStatus,
}

struct Loaded {
    state: ProceduralState,
    fused: Arc<FusedAdapter>,
    plan: FusionPlan,
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// One policy process: owns its parameter host exclusively and runs chunks
/// strictly sequentially.
pub struct Session {
    snapshot: Arc<BankSnapshot>,
    embedder: Arc<EmbeddingService>,
    vlm: Arc<dyn VlmClient>,
    policy: Arc<dyn Policy>,
    config: SessionConfig,
    host: ParameterHost,
    history: Vec<HistoryEntry>,
    loaded: Option<Loaded>,
    next_chunk: usize,
}

impl Session {
    pub fn new(
        snapshot: Arc<BankSnapshot>,
        embedder: Arc<EmbeddingService>,
        vlm: Arc<dyn VlmClient>,
        policy: Arc<dyn Policy>,
        mut host: ParameterHost,
        config: SessionConfig,
    ) -> Result<Self, RuntimeError> {
        config.check()?;
        if host.is_staged() {
            return Err(RuntimeError::HostNotIdle);
        }
        if config.base_merged {
            let base = snapshot.base_adapter.as_ref().ok_or_else(|| {
                RuntimeError::InvalidConfig("base_merged is set but the bank has no base adapter".into())
            })?;
            host.merge_adapter(base)?;
        }
        Ok(Self {
            snapshot,
            embedder,
            vlm,
            policy,
            config,
            host,
            history: Vec::new(),
            loaded: None,
            next_chunk: 0,
        })
    }

    pub fn host(&self) -> &ParameterHost {
        &self.host
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    /// Clears history and the reusable adapter; chunk numbering restarts.
    pub fn reset(&mut self) {
        self.history.clear();
        self.loaded = None;
        self.next_chunk = 0;
    }

    fn plan_for(&self, state: &ProceduralState, timings: &mut PhaseTimings) -> Result<Loaded, RuntimeError> {
        let start = Instant::now();
        let (_, mut plan) = self.snapshot.retrieve(
            state,
            self.config.k,
            self.config.temperature,
            self.embedder.as_ref(),
        )?;
        plan.mode = self.config.fusion_mode;
        timings.retrieve_ms = ms_since(start);

        let start = Instant::now();
        let sets = self.snapshot.adapters_for(&plan)?;
        let fused = fuse(&plan, &sets)?;
        timings.fuse_ms = ms_since(start);
        Ok(Loaded {
            state: state.clone(),
            fused: Arc::new(fused),
            plan,
        })
    }

    /// Runs one action chunk. The host is never left adapted: any failure
    /// after `apply` reverts before the error is returned.
    pub fn run_chunk(&mut self, obs: &Observation, instruction: &str) -> Result<(ActionChunk, StepTrace), RuntimeError> {
        if self.host.is_staged() {
            return Err(RuntimeError::HostNotIdle);
        }
        let chunk_index = self.next_chunk;
        let mut timings = PhaseTimings::default();
        let embed_before = self.embedder.stats();

        let start = Instant::now();
        let request = ExtractionRequest::new(obs.image.clone(), instruction, self.history.clone())?;
        let outcome = extract_state(&request, &self.config.extractor, self.vlm.as_ref())?;
        timings.extract_ms = ms_since(start);

        let mut plan = None;
        let mut reused = false;
        let chunk = match &outcome.extracted {
            Extracted::BaseOnly => {
                let start = Instant::now();
                let chunk = self.policy.act(&self.host, obs, instruction).map_err(RuntimeError::Policy)?;
                timings.act_ms = ms_since(start);
                chunk
            }
            Extracted::State(state) => {
                let reusable = self.config.reuse_enabled
                    && self.loaded.as_ref().is_some_and(|l| l.state.same_stage(state));
                if !reusable {
                    self.loaded = Some(self.plan_for(state, &mut timings)?);
                }
                reused = reusable;
                let loaded = self.loaded.as_ref().expect("set above");
                plan = Some(loaded.plan.clone());

                let start = Instant::now();
                self.host.apply(&loaded.fused)?;
                timings.apply_ms = ms_since(start);

                let start = Instant::now();
                let acted = self.policy.act(&self.host, obs, instruction);
                timings.act_ms = ms_since(start);

                let start = Instant::now();
                self.host.revert()?;
                timings.revert_ms = ms_since(start);
                acted.map_err(RuntimeError::Policy)?
            }
        };

        if let Some(state) = outcome.state() {
            self.history = record_step(&self.history, chunk_index as u64, &obs.observation_ref, state.clone())?;
        }
        self.next_chunk += 1;

        let embed_after = self.embedder.stats();
        let calls = ApiCalls {
            vlm_call_ms: outcome.attempts.iter().map(|a| a.elapsed_ms).collect(),
            embed_call_ms: embed_after.call_ms[embed_before.call_ms.len()..].to_vec(),
            embed_cache_hits: embed_after.cache_hits - embed_before.cache_hits,
        };
        let trace = StepTrace {
            chunk_index,
            extracted: outcome.extracted,
            fallback: outcome.fallback,
            plan,
            reused,
            timings,
            calls,
        };
        Ok((chunk, trace))
    }

    /// Loops chunks until the environment reports done or `max_chunks` ran.
    /// Errors carry the traces completed so far.
    pub fn run_episode<E: Environment + ?Sized>(
        &mut self,
        env: &mut E,
        instruction: &str,
        max_chunks: usize,
        overrides: &EpisodeOverrides,
    ) -> Result<EpisodeTrace, RuntimeError> {
        if max_chunks == 0 {
            return Err(RuntimeError::InvalidConfig("max_chunks must be >= 1".into()));
        }
        let episode_cfg = overrides.apply_to(&self.config);
        episode_cfg.check()?;
        let saved = std::mem::replace(&mut self.config, episode_cfg);
        self.reset();
        let result = self.episode_loop(env, instruction, max_chunks);
        self.config = saved;
        self.loaded = None;
        result
    }

    fn episode_loop<E: Environment + ?Sized>(
        &mut self,
        env: &mut E,
        instruction: &str,
        max_chunks: usize,
    ) -> Result<EpisodeTrace, RuntimeError> {
        let mut steps = Vec::new();
        let mut status = EnvStatus::Continue;
        let abort = |source: RuntimeError, steps: Vec<StepTrace>| RuntimeError::Episode {
            source: Box::new(source),
            partial: steps,
        };
        for _ in 0..max_chunks {
            let obs = match env.observe() {
                Ok(obs) => obs,
                Err(e) => return Err(abort(RuntimeError::Environment(e), steps)),
            };
            let (chunk, trace) = match self.run_chunk(&obs, instruction) {
                Ok(r) => r,
                Err(e) => return Err(abort(e, steps)),
            };
            steps.push(trace);
            match env.step(&chunk) {
                Ok(EnvStatus::Done) => {
                    status = EnvStatus::Done;
                    break;
                }
                Ok(EnvStatus::Continue) => {}
                Err(e) => return Err(abort(RuntimeError::Environment(e), steps)),
            }
        }
        Ok(EpisodeTrace { steps, status })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseStats {
    pub phase: &'static str,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub chunks: usize,
    pub phases: Vec<PhaseStats>,
    pub vlm_calls: usize,
    pub vlm_call_mean_ms: Option<f64>,
    pub embed_calls: usize,
    pub embed_call_mean_ms: Option<f64>,
    pub embed_cache_hits: u64,
    pub adapter_reuses: usize,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Nearest-rank percentile of a non-empty sample.
fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn summarize_latency(traces: &[StepTrace]) -> Result<LatencyReport, MatchError> {
    if traces.is_empty() {
        return Err(MatchError::EmptyInput);
    }
    let phases = PhaseTimings::NAMES
        .iter()
        .enumerate()
        .map(|(i, &phase)| {
            let xs: Vec<f64> = traces.iter().map(|t| t.timings.values()[i]).collect();
            PhaseStats {
                phase,
                mean_ms: mean(&xs).expect("non-empty"),
                p95_ms: percentile(&xs, 95.0),
            }
        })
        .collect();
    let vlm: Vec<f64> = traces.iter().flat_map(|t| t.calls.vlm_call_ms.iter().copied()).collect();
    let embed: Vec<f64> = traces.iter().flat_map(|t| t.calls.embed_call_ms.iter().copied()).collect();
    Ok(LatencyReport {
        chunks: traces.len(),
        phases,
        vlm_calls: vlm.len(),
        vlm_call_mean_ms: mean(&vlm),
        embed_calls: embed.len(),
        embed_call_mean_ms: mean(&embed),
        embed_cache_hits: traces.iter().map(|t| t.calls.embed_cache_hits).sum(),
        adapter_reuses: traces.iter().filter(|t| t.reused).count(),
    })
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>12} {:>12}", "phase", "mean_ms", "p95_ms")?;
        for p in &self.phases {
            writeln!(f, "{:<10} {:>12.3} {:>12.3}", p.phase, p.mean_ms, p.p95_ms)?;
        }
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |m| format!("{m:.3}"));
        writeln!(f, "vlm calls: {} (mean {} ms)", self.vlm_calls, opt(self.vlm_call_mean_ms))?;
        writeln!(f, "embed calls: {} (mean {} ms)", self.embed_calls, opt(self.embed_call_mean_ms))?;
        writeln!(f, "embed cache hits: {}", self.embed_cache_hits)?;
        write!(f, "chunks: {}, adapter reuses: {}", self.chunks, self.adapter_reuses)
    }
}
