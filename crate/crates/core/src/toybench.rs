//! Desk-scale benchmark: synthetic tasks with known linear target policies,
//! closed-form low-rank task adapters, a seen/unseen split and evaluation of
//! retrieval quality, transfer error and the top-k sweep.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{write_adapter, AdapterError, AdapterSet, Bank, BankError, BankSnapshot};
use crate::embed::{Embedder, EmbeddingService, HashedEmbedder, OneHotEmbedder};
use crate::extract::{ImageData, ScriptedVlm};
use crate::fuse::{FusionMode, ParameterHost};
use crate::matching::{rank_memories, rank_of, MatchError};
use crate::runtime::{
    ActionChunk, EnvStatus, Environment, EpisodeOverrides, Observation, Policy, RuntimeError,
    Session, SessionConfig,
};
use crate::schema::{
    Action, EeOrientation, EntityShape, Field, ProceduralState, StateSequence, TargetPoint,
};

/// Name of the single policy layer every synthetic adapter targets.
pub const LAYER: &str = "policy";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
    #[error("need {requested} distinct states but the grid has only {available}")]
    InsufficientStateGrid { requested: usize, available: usize },
    #[error("could not build an unseen variant of {0} with a unique best match")]
    Construction(String),
    #[error("{0} is not a seen task")]
    NotSeen(String),
    #[error("report has no rows")]
    EmptyReport,
    #[error("I/O on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |e| BenchError::Io(path.display().to_string(), e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderChoice {
    #[default]
    Onehot,
    Hashed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    pub d_in: usize,
    pub d_out: usize,
    pub r: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub states_per_task: usize,
    pub k_values: Vec<usize>,
    pub modes: Vec<FusionMode>,
    pub probe_count: usize,
    pub embedder: EmbedderChoice,
    /// Dimensionality of the hashed embedder; ignored for one-hot.
    pub hash_dims: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 20240917,
            d_in: 64,
            d_out: 64,
            r: 32,
            n_seen: 8,
            n_unseen: 9,
            states_per_task: 3,
            k_values: vec![1, 2, 3],
            modes: FusionMode::ALL.to_vec(),
            probe_count: 32,
            embedder: EmbedderChoice::Onehot,
            hash_dims: 64,
        }
    }
}

impl BenchConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, BenchError> {
        let cfg: Self = toml::from_str(s).map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let path = path.as_ref();
        Self::from_toml_str(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn check(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidConfig(m.to_string()));
        if self.d_in == 0 || self.d_out == 0 {
            return bad("d_in and d_out must be positive");
        }
        if self.r == 0 || self.r > self.d_in.min(self.d_out) {
            return bad("r must be in 1..=min(d_in, d_out)");
        }
        if self.n_seen < 2 {
            return bad("n_seen must be >= 2");
        }
        if self.states_per_task == 0 {
            return bad("states_per_task must be >= 1");
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return bad("k_values must be non-empty and positive");
        }
        if self.modes.is_empty() {
            return bad("modes must be non-empty");
        }
        if self.probe_count == 0 {
            return bad("probe_count must be >= 1");
        }
        if self.embedder == EmbedderChoice::Hashed && self.hash_dims < 8 {
            return bad("hash_dims must be >= 8");
        }
        Ok(())
    }

    pub fn embedder(&self) -> Arc<dyn Embedder> {
        match self.embedder {
            EmbedderChoice::Onehot => Arc::new(OneHotEmbedder::new()),
            EmbedderChoice::Hashed => {
                Arc::new(HashedEmbedder::new(self.seed, self.hash_dims).expect("checked dims"))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub states: StateSequence,
    /// W*, shape (d_out, d_in).
    pub target_map: DMatrix<f64>,
    pub split: Split,
    pub gold_source: Option<String>,
}

impl SyntheticTask {
    pub fn task_id(&self) -> &str {
        self.states.task_id()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub base: DMatrix<f64>,
    pub tasks: Vec<SyntheticTask>,
    pub probes: Vec<DVector<f64>>,
}

impl Suite {
    pub fn seen(&self) -> impl Iterator<Item = &SyntheticTask> {
        self.tasks.iter().filter(|t| t.split == Split::Seen)
    }

    pub fn unseen(&self) -> impl Iterator<Item = &SyntheticTask> {
        self.tasks.iter().filter(|t| t.split == Split::Unseen)
    }

    pub fn task(&self, task_id: &str) -> Option<&SyntheticTask> {
        self.tasks.iter().find(|t| t.task_id() == task_id)
    }
}

fn state_grid() -> Vec<ProceduralState> {
    let mut grid = Vec::new();
    for &a in Action::ALL {
        for &s in EntityShape::ALL {
            for &o in EeOrientation::ALL {
                for &t in TargetPoint::ALL {
                    grid.push(ProceduralState::new(format!("{a} {s}"), a, s, o, t));
                }
            }
        }
    }
    grid
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Replaces one non-action field with a different value of the same field.
fn perturb(state: &ProceduralState, rng: &mut ChaCha8Rng) -> ProceduralState {
    let fields = [Field::EntityShape, Field::EeOrientation, Field::TargetPoint];
    let field = fields[rng.random_range(0..fields.len())];
    let mut out = state.clone();
    match field {
        Field::EntityShape => {
            let choices: Vec<_> = EntityShape::ALL.iter().filter(|v| **v != state.entity_shape).collect();
            out.entity_shape = **choices.choose(rng).expect("several values");
        }
        Field::EeOrientation => {
            let choices: Vec<_> = EeOrientation::ALL.iter().filter(|v| **v != state.ee_orientation).collect();
            out.ee_orientation = **choices.choose(rng).expect("several values");
        }
        Field::TargetPoint => {
            let choices: Vec<_> = TargetPoint::ALL.iter().filter(|v| **v != state.target_point).collect();
            out.target_point = **choices.choose(rng).expect("several values");
        }
        Field::Action => unreachable!("action is never perturbed"),
    }
    out.subtask = format!("{} (variant)", state.subtask);
    out
}

const MAX_PERTURB_ATTEMPTS: usize = 10_000;

/// Builds the suite deterministically from `cfg.seed`. Seen tasks get
/// disjoint states from the enum grid and `W* = W0 + U V` with rank `r`;
/// unseen task `i` copies W* of seen task `i mod n_seen` and perturbs one
/// non-action field per state, re-drawing until that seen task is the unique
/// best match under one-hot matching.
pub fn generate_suite(cfg: &BenchConfig) -> Result<Suite, BenchError> {
    cfg.check()?;
    let mut grid = state_grid();
    let requested = cfg.n_seen * cfg.states_per_task;
    if requested > grid.len() {
        return Err(BenchError::InsufficientStateGrid {
            requested,
            available: grid.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = gaussian(&mut rng, cfg.d_out, cfg.d_in, 1.0 / (cfg.d_in as f64).sqrt());
    grid.shuffle(&mut rng);

    let mut tasks = Vec::new();
    for i in 0..cfg.n_seen {
        let task_id = format!("seen-{i:02}");
        let states = grid[i * cfg.states_per_task..(i + 1) * cfg.states_per_task].to_vec();
        let up = gaussian(&mut rng, cfg.d_out, cfg.r, 1.0 / (cfg.r as f64).sqrt());
        let down = gaussian(&mut rng, cfg.r, cfg.d_in, 1.0 / (cfg.d_in as f64).sqrt());
        tasks.push(SyntheticTask {
            states: StateSequence::new(task_id, states).expect("non-empty"),
            target_map: &base + up * down,
            split: Split::Seen,
            gold_source: None,
        });
    }

    let memories: Vec<StateSequence> = tasks.iter().map(|t| t.states.clone()).collect();
    let onehot = OneHotEmbedder::new();
    for i in 0..cfg.n_unseen {
        let gold = &tasks[i % cfg.n_seen];
        let gold_id = gold.task_id().to_string();
        let mut states = Vec::with_capacity(cfg.states_per_task);
        for state in gold.states.states() {
            let mut found = None;
            for _ in 0..MAX_PERTURB_ATTEMPTS {
                let candidate = perturb(state, &mut rng);
                let ranked = rank_memories(&candidate, &memories, &onehot).map_err(MatchError::from)?;
                if ranked[0].task_id == gold_id && ranked[1].similarity < ranked[0].similarity {
                    found = Some(candidate);
                    break;
                }
            }
            states.push(found.ok_or_else(|| BenchError::Construction(gold_id.clone()))?);
        }
        tasks.push(SyntheticTask {
            states: StateSequence::new(format!("unseen-{i:02}"), states).expect("non-empty"),
            target_map: gold.target_map.clone(),
            split: Split::Unseen,
            gold_source: Some(gold_id),
        });
    }

    let probes = (0..cfg.probe_count)
        .map(|_| DVector::from_fn(cfg.d_in, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Ok(Suite { base, tasks, probes })
}

/// Best rank-`r` factorization of `W* - W0`: `down = Σ^½ Vᵀ`, `up = U Σ^½`,
/// with `scaling_alpha = r` so the scaling factor is 1.
pub fn fit_task_adapter(base: &DMatrix<f64>, task: &SyntheticTask, r: usize) -> Result<AdapterSet, BenchError> {
    if task.split != Split::Seen {
        return Err(BenchError::NotSeen(task.task_id().to_string()));
    }
    let delta = &task.target_map - base;
    if r == 0 || r > delta.nrows().min(delta.ncols()) {
        return Err(BenchError::InvalidConfig(format!("rank {r} does not fit {:?}", delta.shape())));
    }
    let (rows, cols) = delta.shape();
    let svd = delta.svd(true, true);
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let sqrt_s = DVector::from_iterator(r, svd.singular_values.iter().take(r).map(|s| s.sqrt()));
    let up = DMatrix::from_fn(rows, r, |i, j| u[(i, j)] * sqrt_s[j]);
    let down = DMatrix::from_fn(r, cols, |i, j| sqrt_s[i] * v_t[(i, j)]);
    Ok(AdapterSet::from_factors(task.task_id(), r as f64, [(LAYER, &up, &down)])?)
}

fn host_for(base: &DMatrix<f64>) -> ParameterHost {
    ParameterHost::new([(LAYER.to_string(), base.map(|v| v as f32))].into())
}

fn relative_error(host: &ParameterHost, target: &DMatrix<f64>, probes: &[DVector<f64>]) -> f64 {
    let errs: Vec<f64> = probes
        .iter()
        .map(|x| {
            let y = DVector::from_vec(host.forward(LAYER, x.as_slice()).expect("probe width"));
            let want = target * x;
            (y - &want).norm() / want.norm()
        })
        .collect();
    errs.iter().sum::<f64>() / errs.len() as f64
}

/// Emits the layer output for every probe, so one chunk scores all probes.
struct ProbePolicy {
    probes: Arc<Vec<DVector<f64>>>,
}

impl Policy for ProbePolicy {
    fn act(&self, host: &ParameterHost, _obs: &Observation, _instruction: &str) -> Result<ActionChunk, String> {
        self.probes
            .iter()
            .map(|x| host.forward(LAYER, x.as_slice()).ok_or_else(|| "probe width mismatch".to_string()))
            .collect::<Result<_, _>>()
            .map(|actions| ActionChunk { actions })
    }
}

/// One chunk per task state; scores each chunk against W*.
struct ReplayEnv<'a> {
    chunks: usize,
    done_after: usize,
    targets: Vec<DVector<f64>>,
    errors: Vec<f64>,
    probes: &'a [DVector<f64>],
}

impl Environment for ReplayEnv<'_> {
    fn observe(&mut self) -> Result<Observation, String> {
        Ok(Observation {
            image: ImageData::new("image/x-synthetic", (self.chunks as u32).to_le_bytes().to_vec()),
            observation_ref: format!("frame-{}", self.chunks),
            features: self.probes[0].as_slice().to_vec(),
        })
    }

    fn step(&mut self, chunk: &ActionChunk) -> Result<EnvStatus, String> {
        let err = chunk
            .actions
            .iter()
            .zip(&self.targets)
            .map(|(y, want)| (DVector::from_column_slice(y) - want).norm() / want.norm())
            .sum::<f64>()
            / self.targets.len() as f64;
        self.errors.push(err);
        self.chunks += 1;
        Ok(if self.chunks >= self.done_after {
            EnvStatus::Done
        } else {
            EnvStatus::Continue
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub task_id: String,
    pub gold_source: String,
    pub k: usize,
    pub mode: FusionMode,
    /// Worst rank of the gold memory over the task's states.
    pub gold_rank: usize,
    /// Mean over states of the gold memory's task relevance.
    pub s_gold: f64,
    /// Mean over chunks of the coefficient-weighted similarity of the plan.
    pub plan_similarity: f64,
    pub base_error: f64,
    pub fused_error: f64,
    pub gain: f64,
    pub relative_gain: f64,
    pub reused_chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub embed_model_id: String,
    pub rows: Vec<BenchRow>,
    /// Over every (unseen task, state) query.
    pub mrr: f64,
    /// Largest relative error of a seen task's own adapter applied to W0.
    pub max_self_error: f64,
}

struct TaskRetrieval {
    ranks: Vec<usize>,
    s_gold: f64,
}

/// Runs scripted episodes for every (unseen task, k, mode) cell in parallel.
/// Each cell owns its session and parameter host.
pub fn evaluate(
    suite: &Suite,
    snapshot: Arc<BankSnapshot>,
    embedder: Arc<EmbeddingService>,
    cfg: &BenchConfig,
) -> Result<BenchReport, BenchError> {
    let unseen: Vec<&SyntheticTask> = suite.unseen().collect();
    let probes = Arc::new(suite.probes.clone());

    let retrieval = unseen
        .iter()
        .map(|task| {
            let gold = task.gold_source.as_deref().expect("unseen tasks name a gold source");
            let mut ranks = Vec::new();
            let mut s_gold = 0.0;
            for state in task.states.states() {
                let results = snapshot.match_all(state, embedder.as_ref())?;
                let ids: Vec<String> = results.iter().map(|r| r.task_id.clone()).collect();
                ranks.push(rank_of(&ids, gold)?);
                s_gold += results.iter().find(|r| r.task_id == gold).expect("ranked").similarity;
            }
            Ok(TaskRetrieval {
                s_gold: s_gold / ranks.len() as f64,
                ranks,
            })
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    let all_ranks: Vec<usize> = retrieval.iter().flat_map(|r| r.ranks.iter().copied()).collect();
    let mrr = all_ranks.iter().map(|r| 1.0 / *r as f64).sum::<f64>() / all_ranks.len().max(1) as f64;

    let base_host = host_for(&suite.base);
    let max_self_error = suite
        .seen()
        .map(|task| {
            let mut host = base_host.clone();
            host.merge_adapter(snapshot.adapters.get(task.task_id()).ok_or_else(|| {
                BankError::UnknownTaskId(task.task_id().to_string())
            })?)
            .map_err(RuntimeError::from)?;
            Ok(relative_error(&host, &task.target_map, &suite.probes))
        })
        .collect::<Result<Vec<f64>, BenchError>>()?
        .into_iter()
        .fold(0.0, f64::max);

    let cells: Vec<(usize, usize, FusionMode)> = (0..unseen.len())
        .flat_map(|t| {
            cfg.k_values
                .iter()
                .flat_map(move |&k| cfg.modes.iter().map(move |&m| (t, k, m)))
        })
        .collect();

    let rows = cells
        .par_iter()
        .map(|&(t, k, mode)| {
            let task = unseen[t];
            let replies: Vec<String> = task.states.states().iter().map(|s| s.to_canonical_json()).collect();
            let session_cfg = SessionConfig {
                k,
                fusion_mode: mode,
                ..SessionConfig::default()
            };
            let mut session = Session::new(
                snapshot.clone(),
                embedder.clone(),
                Arc::new(ScriptedVlm::new(replies)),
                Arc::new(ProbePolicy { probes: probes.clone() }),
                base_host.clone(),
                session_cfg,
            )?;
            let n_chunks = task.states.states().len();
            let mut env = ReplayEnv {
                chunks: 0,
                done_after: n_chunks,
                targets: suite.probes.iter().map(|x| &task.target_map * x).collect(),
                errors: Vec::new(),
                probes: &suite.probes,
            };
            let instruction = task.task_id().replace('-', " ");
            let episode = session.run_episode(&mut env, &instruction, n_chunks, &EpisodeOverrides::default())?;

            let mut plan_similarity = 0.0;
            for (step, state) in episode.steps.iter().zip(task.states.states()) {
                let plan = step.plan.as_ref().expect("scripted extraction always yields a state");
                let results = snapshot.match_all(state, embedder.as_ref())?;
                plan_similarity += plan
                    .selected
                    .iter()
                    .zip(&plan.weights)
                    .map(|(id, w)| w * results.iter().find(|r| &r.task_id == id).expect("ranked").similarity)
                    .sum::<f64>();
            }
            let chunks = episode.steps.len() as f64;
            let base_error = relative_error(&base_host, &task.target_map, &suite.probes);
            let fused_error = env.errors.iter().sum::<f64>() / chunks;
            let gain = base_error - fused_error;
            Ok(BenchRow {
                task_id: task.task_id().to_string(),
                gold_source: task.gold_source.clone().expect("unseen"),
                k,
                mode,
                gold_rank: *retrieval[t].ranks.iter().max().expect("non-empty"),
                s_gold: retrieval[t].s_gold,
                plan_similarity: plan_similarity / chunks,
                base_error,
                fused_error,
                gain,
                relative_gain: gain / base_error,
                reused_chunks: episode.steps.iter().filter(|s| s.reused).count(),
            })
        })
        .collect::<Result<Vec<_>, BenchError>>()?;

    Ok(BenchReport {
        config: cfg.clone(),
        embed_model_id: embedder.model_id().to_string(),
        rows,
        mrr,
        max_self_error,
    })
}

impl BenchReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), BenchError> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }

    /// Mean fused error per (k, mode), in sweep order.
    pub fn sweep_means(&self) -> Vec<(usize, FusionMode, f64, f64)> {
        let mut out = Vec::new();
        for &k in &self.config.k_values {
            for &mode in &self.config.modes {
                let rows: Vec<&BenchRow> = self.rows.iter().filter(|r| r.k == k && r.mode == mode).collect();
                let n = rows.len().max(1) as f64;
                out.push((
                    k,
                    mode,
                    rows.iter().map(|r| r.fused_error).sum::<f64>() / n,
                    rows.iter().map(|r| r.relative_gain).sum::<f64>() / n,
                ));
            }
        }
        out
    }

    /// Cells of the (task, k, mode) grid that have no row.
    pub fn missing_cells(&self) -> Vec<(String, usize, FusionMode)> {
        let tasks: BTreeSet<&str> = self.rows.iter().map(|r| r.task_id.as_str()).collect();
        let mut missing = Vec::new();
        for task in tasks {
            for &k in &self.config.k_values {
                for &mode in &self.config.modes {
                    if !self.rows.iter().any(|r| r.task_id == task && r.k == k && r.mode == mode) {
                        missing.push((task.to_string(), k, mode));
                    }
                }
            }
        }
        missing
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Correlation {
    Value(f64),
    /// One side has no variation; reported as 0.
    Degenerate,
    /// Fewer than two points.
    Undefined,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Value(v) => Some(v),
            Self::Degenerate => Some(0.0),
            Self::Undefined => None,
        }
    }
}

impl fmt::Display for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Value(v) => write!(f, "{v:.4}"),
            Self::Degenerate => write!(f, "0 (degenerate)"),
            Self::Undefined => write!(f, "n/a"),
        }
    }
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Correlation {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 {
        return Correlation::Undefined;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Correlation::Degenerate;
    }
    Correlation::Value(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainPoint {
    pub task_id: String,
    pub k: usize,
    pub mode: FusionMode,
    pub similarity: f64,
    pub s_gold: f64,
    pub gain: f64,
    pub relative_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainCurve {
    /// Sorted by ascending similarity.
    pub points: Vec<GainPoint>,
    /// Between `similarity` and `relative_gain`.
    pub spearman: Correlation,
}

/// One point per report row: the plan's weighted similarity against the
/// relative error reduction it achieved.
pub fn similarity_gain_curve(report: &BenchReport) -> Result<GainCurve, BenchError> {
    if report.rows.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    let mut points: Vec<GainPoint> = report
        .rows
        .iter()
        .map(|r| GainPoint {
            task_id: r.task_id.clone(),
            k: r.k,
            mode: r.mode,
            similarity: r.plan_similarity,
            s_gold: r.s_gold,
            gain: r.gain,
            relative_gain: r.relative_gain,
        })
        .collect();
    points.sort_by(|a, b| a.similarity.total_cmp(&b.similarity));
    let xs: Vec<f64> = points.iter().map(|p| p.similarity).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.relative_gain).collect();
    Ok(GainCurve {
        spearman: spearman(&xs, &ys),
        points,
    })
}

impl GainCurve {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), BenchError> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }
}

pub fn render_summary(report: &BenchReport, curve: &GainCurve) -> String {
    let c = &report.config;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "suite: seed={} d_in={} d_out={} r={} seen={} unseen={} states/task={} probes={}",
        c.seed, c.d_in, c.d_out, c.r, c.n_seen, c.n_unseen, c.states_per_task, c.probe_count
    );
    let _ = writeln!(s, "embedder: {}", report.embed_model_id);
    let _ = writeln!(s, "MRR: {:.6}", report.mrr);
    let _ = writeln!(s, "max self-application error: {:.3e}", report.max_self_error);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:>3} {:>7} {:>14} {:>14}", "k", "mode", "fused_error", "rel_gain");
    for (k, mode, err, gain) in report.sweep_means() {
        let _ = writeln!(s, "{k:>3} {:>7} {err:>14.6e} {gain:>14.6}", mode.as_str());
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "similarity-gain points: {}", curve.points.len());
    let _ = writeln!(s, "spearman(similarity, relative gain): {}", curve.spearman);
    s
}

/// Paths written by [`run_bench`].
#[derive(Debug, Clone)]
pub struct BenchOutputs {
    pub report: BenchReport,
    pub curve: GainCurve,
    pub bank_dir: PathBuf,
    pub report_csv: PathBuf,
    pub gain_csv: PathBuf,
    pub summary_txt: PathBuf,
}

/// Registers the suite's seen tasks in a fresh bank at `dir`.
pub fn build_bank(suite: &Suite, cfg: &BenchConfig, dir: &Path, embedder: &dyn Embedder) -> Result<Bank, BenchError> {
    let mut bank = Bank::init(dir, embedder.model_id())?;
    let staging = tempfile::tempdir().map_err(io_err(dir))?;
    for task in suite.seen() {
        let set = fit_task_adapter(&suite.base, task, cfg.r)?;
        let path = staging.path().join(format!("{}.lora", task.task_id()));
        write_adapter(&set, &path)?;
        bank.register_memory(task.task_id(), task.states.states().to_vec(), &path)?;
    }
    bank.precompute_embeddings(embedder)?;
    Ok(bank)
}

/// Generates the suite, builds its bank under `out/bank`, evaluates the
/// sweep and writes report.csv, similarity_gain.csv and summary.txt.
pub fn run_bench(cfg: &BenchConfig, out: impl AsRef<Path>) -> Result<BenchOutputs, BenchError> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(io_err(out))?;
    let suite = generate_suite(cfg)?;
    let backend = cfg.embedder();
    let bank_dir = out.join("bank");
    let bank = build_bank(&suite, cfg, &bank_dir, backend.as_ref())?;
    let snapshot = Arc::new(bank.snapshot()?);
    let embedder = Arc::new(EmbeddingService::in_memory(backend));
    let report = evaluate(&suite, snapshot, embedder, cfg)?;
    let curve = similarity_gain_curve(&report)?;

    let report_csv = out.join("report.csv");
    let gain_csv = out.join("similarity_gain.csv");
    let summary_txt = out.join("summary.txt");
    report.write_csv(&report_csv)?;
    curve.write_csv(&gain_csv)?;
    fs::write(&summary_txt, render_summary(&report, &curve)).map_err(io_err(&summary_txt))?;
    Ok(BenchOutputs {
        report,
        curve,
        bank_dir,
        report_csv,
        gain_csv,
        summary_txt,
    })
}
