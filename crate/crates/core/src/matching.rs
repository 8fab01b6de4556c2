//! Action-aware procedural matching and retrieval scoring.
//!
//! Similarity between two states is a weighted sum of per-field cosine
//! similarities, where the query's action selects the weight profile. A
//! memory's relevance is its best-matching state. The top-k memories become
//! a [`FusionPlan`] with softmax coefficients over their relevances.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, EmbedError, Embedder};
use crate::fuse::FusionMode;
use crate::schema::{Action, Field, ProceduralState, StateSequence};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
const PLAN_WEIGHT_TOLERANCE: f64 = 1e-9;

const EMPHASIZED_WEIGHT: f64 = 0.35;
const BASE_WEIGHT: f64 = 0.15;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("temperature must be finite and > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("gold task {0:?} not found in ranking")]
    GoldNotFound(String),
    #[error("no ranked lists given")]
    EmptyInput,
    #[error("invalid fusion plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Per-field weights `(w_a, w_o, w_e, w_p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    pub action: f64,
    pub entity_shape: f64,
    pub ee_orientation: f64,
    pub target_point: f64,
}

impl WeightProfile {
    /// Action consistency always carries 0.35; `pick` additionally emphasizes
    /// object geometry, `place` the target point and `push` the end-effector
    /// orientation. Nothing is renormalized.
    pub fn for_action(action: Action) -> Self {
        let mut w = Self {
            action: EMPHASIZED_WEIGHT,
            entity_shape: BASE_WEIGHT,
            ee_orientation: BASE_WEIGHT,
            target_point: BASE_WEIGHT,
        };
        match action {
            Action::Pick => w.entity_shape = EMPHASIZED_WEIGHT,
            Action::Place => w.target_point = EMPHASIZED_WEIGHT,
            Action::Push => w.ee_orientation = EMPHASIZED_WEIGHT,
            Action::Press | Action::Drag => {}
        }
        w
    }

    pub fn weight(&self, field: Field) -> f64 {
        match field {
            Field::Action => self.action,
            Field::EntityShape => self.entity_shape,
            Field::EeOrientation => self.ee_orientation,
            Field::TargetPoint => self.target_point,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            action: self.action * c,
            entity_shape: self.entity_shape * c,
            ee_orientation: self.ee_orientation * c,
            target_point: self.target_point * c,
        }
    }

    pub fn total(&self) -> f64 {
        Field::ALL.iter().map(|f| self.weight(*f)).sum()
    }

    /// `Σ_f w_f · sims_f`, accumulated in field order.
    pub fn combine(&self, sims: &FieldSims) -> f64 {
        Field::ALL
            .iter()
            .map(|f| self.weight(*f) * sims.get(*f))
            .sum()
    }
}

pub fn weight_profile(action: Action) -> WeightProfile {
    WeightProfile::for_action(action)
}

/// Per-field cosine similarities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FieldSims {
    pub action: f64,
    pub entity_shape: f64,
    pub ee_orientation: f64,
    pub target_point: f64,
}

impl FieldSims {
    pub fn get(&self, field: Field) -> f64 {
        match field {
            Field::Action => self.action,
            Field::EntityShape => self.entity_shape,
            Field::EeOrientation => self.ee_orientation,
            Field::TargetPoint => self.target_point,
        }
    }

    fn set(&mut self, field: Field, v: f64) {
        match field {
            Field::Action => self.action = v,
            Field::EntityShape => self.entity_shape = v,
            Field::EeOrientation => self.ee_orientation = v,
            Field::TargetPoint => self.target_point = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub task_id: String,
    pub similarity: f64,
    pub best_state_index: usize,
    pub field_sims: FieldSims,
}

/// Per-field cosine similarities between two states (subtask excluded).
pub fn field_similarities<E: Embedder + ?Sized>(
    query: &ProceduralState,
    candidate: &ProceduralState,
    embedder: &E,
) -> Result<FieldSims, EmbedError> {
    let mut sims = FieldSims::default();
    for f in Field::ALL {
        let q = embedder.embed(&query.canonical_field_text(f))?;
        let c = embedder.embed(&candidate.canonical_field_text(f))?;
        sims.set(f, cosine(&q, &c)?);
    }
    Ok(sims)
}

pub fn state_similarity_with<E: Embedder + ?Sized>(
    query: &ProceduralState,
    candidate: &ProceduralState,
    profile: &WeightProfile,
    embedder: &E,
) -> Result<(f64, FieldSims), EmbedError> {
    let sims = field_similarities(query, candidate, embedder)?;
    Ok((profile.combine(&sims), sims))
}

pub fn state_similarity<E: Embedder + ?Sized>(
    query: &ProceduralState,
    candidate: &ProceduralState,
    embedder: &E,
) -> Result<(f64, FieldSims), EmbedError> {
    state_similarity_with(query, candidate, &weight_profile(query.action), embedder)
}

/// Relevance of a memory = its best-matched state; ties go to the earliest.
pub fn task_relevance_with<E: Embedder + ?Sized>(
    query: &ProceduralState,
    memory: &StateSequence,
    profile: &WeightProfile,
    embedder: &E,
) -> Result<MatchResult, EmbedError> {
    let mut best: Option<MatchResult> = None;
    for (idx, state) in memory.states().iter().enumerate() {
        let (sim, field_sims) = state_similarity_with(query, state, profile, embedder)?;
        if best.as_ref().is_none_or(|b| sim > b.similarity) {
            best = Some(MatchResult {
                task_id: memory.task_id().to_string(),
                similarity: sim,
                best_state_index: idx,
                field_sims,
            });
        }
    }
    Ok(best.expect("state sequences are non-empty"))
}

pub fn task_relevance<E: Embedder + ?Sized>(
    query: &ProceduralState,
    memory: &StateSequence,
    embedder: &E,
) -> Result<MatchResult, EmbedError> {
    task_relevance_with(query, memory, &weight_profile(query.action), embedder)
}

fn by_relevance(a: &MatchResult, b: &MatchResult) -> Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.task_id.cmp(&b.task_id))
}

/// Scores every memory and returns them in retrieval order.
pub fn rank_memories<'a, E, I>(
    query: &ProceduralState,
    memories: I,
    embedder: &E,
) -> Result<Vec<MatchResult>, EmbedError>
where
    E: Embedder + ?Sized,
    I: IntoIterator<Item = &'a StateSequence>,
{
    let profile = weight_profile(query.action);
    let mut results = memories
        .into_iter()
        .map(|m| task_relevance_with(query, m, &profile, embedder))
        .collect::<Result<Vec<_>, _>>()?;
    results.sort_by(by_relevance);
    Ok(results)
}

/// The executable recipe for one adaptation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub selected: Vec<String>,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub mode: FusionMode,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl FusionPlan {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn weight_of(&self, task_id: &str) -> Option<f64> {
        self.selected
            .iter()
            .position(|t| t == task_id)
            .map(|i| self.weights[i])
    }

    /// Checks the plan invariants: matching lengths, unique ids, positive
    /// finite weights summing to 1 within 1e-9.
    pub fn validate(&self) -> Result<(), MatchError> {
        let bad = |m: String| Err(MatchError::InvalidPlan(m));
        if self.selected.is_empty() {
            return bad("no memories selected".into());
        }
        if self.selected.len() != self.weights.len() {
            return bad(format!(
                "{} ids but {} weights",
                self.selected.len(),
                self.weights.len()
            ));
        }
        let unique: BTreeSet<_> = self.selected.iter().collect();
        if unique.len() != self.selected.len() {
            return bad("duplicate task id in plan".into());
        }
        if let Some(w) = self.weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return bad(format!("weight {w} is not a positive finite number"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > PLAN_WEIGHT_TOLERANCE {
            return bad(format!("weights sum to {sum}, expected 1"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(MatchError::InvalidTemperature(self.temperature));
        }
        Ok(())
    }
}

/// Takes the best `min(k, n)` results and converts their similarities into
/// softmax coefficients over the selected set only.
pub fn select_top_k(
    results: &[MatchResult],
    k: usize,
    temperature: f64,
) -> Result<FusionPlan, MatchError> {
    if results.is_empty() {
        return Err(MatchError::EmptyBank);
    }
    if k == 0 {
        return Err(MatchError::InvalidK);
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(MatchError::InvalidTemperature(temperature));
    }
    let mut ordered: Vec<&MatchResult> = results.iter().collect();
    ordered.sort_by(|a, b| by_relevance(a, b));
    ordered.truncate(k);

    let top = ordered[0].similarity;
    let exps: Vec<f64> = ordered
        .iter()
        .map(|r| ((r.similarity - top) / temperature).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    Ok(FusionPlan {
        selected: ordered.iter().map(|r| r.task_id.clone()).collect(),
        weights: exps.iter().map(|e| e / z).collect(),
        mode: FusionMode::default(),
        temperature,
    })
}

/// Matches plus the plan derived from them; the retrieval reply shared by the
/// CLI and the HTTP service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub matches: Vec<MatchSummary>,
    pub plan: FusionPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub task_id: String,
    pub similarity: f64,
    pub best_state_index: usize,
}

impl Retrieval {
    pub fn new(results: &[MatchResult], plan: FusionPlan) -> Self {
        Self {
            matches: results
                .iter()
                .map(|r| MatchSummary {
                    task_id: r.task_id.clone(),
                    similarity: r.similarity,
                    best_state_index: r.best_state_index,
                })
                .collect(),
            plan,
        }
    }
}

/// 1-based position of `gold` in `ranking`.
pub fn rank_of(ranking: &[String], gold: &str) -> Result<usize, MatchError> {
    ranking
        .iter()
        .position(|t| t == gold)
        .map(|p| p + 1)
        .ok_or_else(|| MatchError::GoldNotFound(gold.to_string()))
}

pub fn mean_reciprocal_rank(lists: &[(Vec<String>, String)]) -> Result<f64, MatchError> {
    if lists.is_empty() {
        return Err(MatchError::EmptyInput);
    }
    let total = lists
        .iter()
        .map(|(ranking, gold)| rank_of(ranking, gold).map(|r| 1.0 / r as f64))
        .sum::<Result<f64, _>>()?;
    Ok(total / lists.len() as f64)
}

/// Serves precomputed vectors first and falls back to another embedder.
pub struct PrecomputedEmbedder<'a, E: ?Sized> {
    vectors: &'a HashMap<String, crate::embed::EmbeddingVector>,
    fallback: &'a E,
}

impl<'a, E: Embedder + ?Sized> PrecomputedEmbedder<'a, E> {
    pub fn new(
        vectors: &'a HashMap<String, crate::embed::EmbeddingVector>,
        fallback: &'a E,
    ) -> Self {
        Self { vectors, fallback }
    }
}

impl<E: Embedder + ?Sized> Embedder for PrecomputedEmbedder<'_, E> {
    fn model_id(&self) -> &str {
        self.fallback.model_id()
    }

    fn embed(&self, text: &str) -> Result<crate::embed::EmbeddingVector, EmbedError> {
        match self.vectors.get(text) {
            Some(v) if v.model_id == self.fallback.model_id() => Ok(v.clone()),
            _ => self.fallback.embed(text),
        }
    }
}
