//! Adapter fusion and host application.
//!
//! Two fusion readings are supported. `factor` sums the down and up factors
//! separately with the plan coefficients and keeps the rank; `delta` sums the
//! materialized per-layer deltas `(alpha/r)·up·down`. They coincide only for a
//! single memory. Application onto a [`ParameterHost`] records the exact bytes
//! of every touched matrix so that `revert` restores them bit for bit.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bank::container::{self, Container, Tensor};
use crate::bank::{delta_name, from_matrix, write_file, AdapterError, AdapterSet, TensorRole};
use crate::matching::{FusionPlan, MatchError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Factor,
    Delta,
}

impl FusionMode {
    pub const ALL: [FusionMode; 2] = [FusionMode::Factor, FusionMode::Delta];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Factor => "factor",
            FusionMode::Delta => "delta",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "factor" => Ok(FusionMode::Factor),
            "delta" => Ok(FusionMode::Delta),
            other => Err(format!("unknown fusion mode {other:?} (expected factor or delta)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum FuseError {
    #[error("incompatible adapters: {0}")]
    IncompatibleAdapters(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("plan names {plan} memories but {sets} adapters were supplied")]
    PlanMismatch { plan: usize, sets: usize },
    #[error(transparent)]
    InvalidPlan(#[from] MatchError),
    #[error("a fused adapter is already applied")]
    AlreadyApplied,
    #[error("no fused adapter is applied")]
    NothingApplied,
    #[error("host has no parameter named {0:?}")]
    UnknownLayer(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub task_ids: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusedPayload {
    Factor(AdapterSet),
    /// Per-layer dense `ΔW` of shape `(d_out, d_in)`.
    Delta(BTreeMap<String, DMatrix<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedAdapter {
    pub payload: FusedPayload,
    pub provenance: Provenance,
}

impl FusedAdapter {
    pub fn mode(&self) -> FusionMode {
        match self.payload {
            FusedPayload::Factor(_) => FusionMode::Factor,
            FusedPayload::Delta(_) => FusionMode::Delta,
        }
    }

    /// The weight delta each layer receives on apply.
    pub fn layer_deltas(&self) -> BTreeMap<String, DMatrix<f64>> {
        match &self.payload {
            FusedPayload::Factor(set) => set
                .layers()
                .map(|l| (l.name.to_string(), set.layer_delta(&l)))
                .collect(),
            FusedPayload::Delta(d) => d.clone(),
        }
    }

    pub fn adapter_id(&self) -> String {
        format!("fused:{}", self.provenance.task_ids.join("+"))
    }

    /// Factor mode encodes as an ordinary adapter container; delta mode as a
    /// container of `<layer>.delta` tensors.
    pub fn to_container(&self) -> Container {
        match &self.payload {
            FusedPayload::Factor(set) => set.to_container(),
            FusedPayload::Delta(deltas) => {
                let mut metadata = BTreeMap::new();
                metadata.insert("adapter_id".to_string(), self.adapter_id());
                metadata.insert("mode".to_string(), FusionMode::Delta.to_string());
                metadata.insert(
                    "task_ids".to_string(),
                    serde_json::to_string(&self.provenance.task_ids).expect("strings serialize"),
                );
                metadata.insert(
                    "weights".to_string(),
                    serde_json::to_string(&self.provenance.weights).expect("floats serialize"),
                );
                let tensors = deltas
                    .iter()
                    .map(|(name, m)| (delta_name(name), from_matrix(m)))
                    .collect();
                Container { metadata, tensors }
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, AdapterError> {
        container::encode(&self.to_container())
    }

    /// Writes the container and returns the SHA-256 of the written bytes.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<String, AdapterError> {
        let bytes = self.to_bytes()?;
        write_file(path.as_ref(), &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// Reads a delta container written by [`FusedAdapter::write`].
pub fn read_delta_container(bytes: &[u8]) -> Result<BTreeMap<String, DMatrix<f32>>, AdapterError> {
    let c = container::decode(bytes)?;
    let mut out = BTreeMap::new();
    for (name, t) in c.tensors {
        match (TensorRole::parse(&name), t.shape.as_slice()) {
            (Some((layer, TensorRole::Delta)), [rows, cols]) => {
                out.insert(
                    layer.to_string(),
                    DMatrix::from_row_slice(*rows, *cols, &t.data),
                );
            }
            _ => {
                return Err(AdapterError::PairingError(format!(
                    "{name}: expected a 2-D <layer>.delta tensor"
                )))
            }
        }
    }
    Ok(out)
}

/// Indices of `plan.selected` in ascending task-id order; all sums run in this
/// order so that permuting the plan does not change the result.
fn summation_order(plan: &FusionPlan) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..plan.selected.len()).collect();
    idx.sort_by(|a, b| plan.selected[*a].cmp(&plan.selected[*b]));
    idx
}

fn check_inputs<S: Borrow<AdapterSet>>(plan: &FusionPlan, sets: &[S]) -> Result<(), FuseError> {
    plan.validate()?;
    if plan.selected.len() != sets.len() {
        return Err(FuseError::PlanMismatch {
            plan: plan.selected.len(),
            sets: sets.len(),
        });
    }
    Ok(())
}

fn provenance(plan: &FusionPlan) -> Provenance {
    Provenance {
        task_ids: plan.selected.clone(),
        weights: plan.weights.clone(),
    }
}

/// `fused.t = Σ_j α_j · set_j.t` for every down and up tensor.
pub fn fuse_factor<S: Borrow<AdapterSet>>(plan: &FusionPlan, sets: &[S]) -> Result<FusedAdapter, FuseError> {
    check_inputs(plan, sets)?;
    let first = sets[0].borrow();
    for (id, s) in plan.selected.iter().zip(sets).skip(1) {
        if !first.factor_compatible(s.borrow()) {
            return Err(FuseError::IncompatibleAdapters(format!(
                "{id} (rank {}, alpha {}) does not match {} (rank {}, alpha {}) in tensor names, ranks, shapes or scaling",
                s.borrow().rank(),
                s.borrow().scaling_alpha(),
                plan.selected[0],
                first.rank(),
                first.scaling_alpha()
            )));
        }
    }
    let order = summation_order(plan);
    let mut tensors = BTreeMap::new();
    for (name, t) in first.tensors() {
        let mut acc = vec![0.0f64; t.data.len()];
        for &j in &order {
            let src = &sets[j].borrow().tensors()[name].data;
            let w = plan.weights[j];
            for (a, v) in acc.iter_mut().zip(src) {
                *a += w * *v as f64;
            }
        }
        tensors.insert(
            name.clone(),
            Tensor::new(t.shape.clone(), acc.into_iter().map(|v| v as f32).collect()),
        );
    }
    let prov = provenance(plan);
    let id = format!("fused:{}", prov.task_ids.join("+"));
    let set = AdapterSet::new(id, first.rank(), first.scaling_alpha(), tensors)?;
    Ok(FusedAdapter {
        payload: FusedPayload::Factor(set),
        provenance: prov,
    })
}

/// `ΔW_L = Σ_j α_j · (alpha_j / r_j) · up_j(L) · down_j(L)`; ranks may differ.
pub fn fuse_delta<S: Borrow<AdapterSet>>(plan: &FusionPlan, sets: &[S]) -> Result<FusedAdapter, FuseError> {
    check_inputs(plan, sets)?;
    let dims = sets[0].borrow().layer_dims();
    for (id, s) in plan.selected.iter().zip(sets) {
        let other = s.borrow().layer_dims();
        if other != dims {
            return Err(FuseError::ShapeMismatch(format!(
                "{id}: layer dims {other:?} differ from {dims:?}"
            )));
        }
    }
    let order = summation_order(plan);
    let mut deltas = BTreeMap::new();
    for (layer, (d_out, d_in)) in &dims {
        let mut acc = DMatrix::<f64>::zeros(*d_out, *d_in);
        for &j in &order {
            let set = sets[j].borrow();
            let factors = set.layer(layer).expect("layer presence checked via dims");
            acc += set.layer_delta(&factors) * plan.weights[j];
        }
        deltas.insert(layer.clone(), acc);
    }
    Ok(FusedAdapter {
        payload: FusedPayload::Delta(deltas),
        provenance: provenance(plan),
    })
}

/// Dispatches on `plan.mode`.
pub fn fuse<S: Borrow<AdapterSet>>(plan: &FusionPlan, sets: &[S]) -> Result<FusedAdapter, FuseError> {
    match plan.mode {
        FusionMode::Factor => fuse_factor(plan, sets),
        FusionMode::Delta => fuse_delta(plan, sets),
    }
}

#[derive(Debug, Clone)]
struct Staged {
    originals: BTreeMap<String, DMatrix<f32>>,
    provenance: Provenance,
}

/// Named policy weight matrices plus at most one staged fused adapter.
#[derive(Debug, Clone, Default)]
pub struct ParameterHost {
    params: BTreeMap<String, DMatrix<f32>>,
    staged: Option<Staged>,
}

impl ParameterHost {
    pub fn new(params: BTreeMap<String, DMatrix<f32>>) -> Self {
        Self { params, staged: None }
    }

    pub fn param(&self, name: &str) -> Option<&DMatrix<f32>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, DMatrix<f32>> {
        &self.params
    }

    pub fn is_staged(&self) -> bool {
        self.staged.is_some()
    }

    pub fn staged_provenance(&self) -> Option<&Provenance> {
        self.staged.as_ref().map(|s| &s.provenance)
    }

    /// Exact byte image of all parameters, for equality checks.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, m) in &self.params {
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            for v in m.iter() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    fn checked_deltas(
        &self,
        deltas: &BTreeMap<String, DMatrix<f64>>,
    ) -> Result<(), FuseError> {
        for (name, d) in deltas {
            let w = self
                .params
                .get(name)
                .ok_or_else(|| FuseError::UnknownLayer(name.clone()))?;
            if w.shape() != d.shape() {
                return Err(FuseError::ShapeMismatch(format!(
                    "{name}: host {:?} vs delta {:?}",
                    w.shape(),
                    d.shape()
                )));
            }
        }
        Ok(())
    }

    fn add_deltas(&mut self, deltas: &BTreeMap<String, DMatrix<f64>>) {
        for (name, d) in deltas {
            let w = self.params.get_mut(name).expect("checked");
            for (wv, dv) in w.iter_mut().zip(d.iter()) {
                *wv = (*wv as f64 + *dv) as f32;
            }
        }
    }

    /// `W ← W + ΔW` for every fused layer. Nothing is modified on error.
    pub fn apply(&mut self, fused: &FusedAdapter) -> Result<(), FuseError> {
        if self.staged.is_some() {
            return Err(FuseError::AlreadyApplied);
        }
        let deltas = fused.layer_deltas();
        self.checked_deltas(&deltas)?;
        let originals = deltas
            .keys()
            .map(|n| (n.clone(), self.params[n].clone()))
            .collect();
        self.add_deltas(&deltas);
        self.staged = Some(Staged {
            originals,
            provenance: fused.provenance.clone(),
        });
        Ok(())
    }

    /// Restores the bytes recorded by the last `apply`.
    pub fn revert(&mut self) -> Result<(), FuseError> {
        let staged = self.staged.take().ok_or(FuseError::NothingApplied)?;
        for (name, original) in staged.originals {
            self.params.insert(name, original);
        }
        Ok(())
    }

    /// Adds an adapter's deltas permanently (no revert record).
    pub fn merge_adapter(&mut self, set: &AdapterSet) -> Result<(), FuseError> {
        if self.staged.is_some() {
            return Err(FuseError::AlreadyApplied);
        }
        let deltas: BTreeMap<_, _> = set
            .layers()
            .map(|l| (l.name.to_string(), set.layer_delta(&l)))
            .collect();
        self.checked_deltas(&deltas)?;
        self.add_deltas(&deltas);
        Ok(())
    }

    /// `y = W x` for one layer, accumulated in f64.
    pub fn forward(&self, layer: &str, x: &[f64]) -> Option<Vec<f64>> {
        let w = self.params.get(layer)?;
        if w.ncols() != x.len() {
            return None;
        }
        Some(
            (0..w.nrows())
                .map(|r| (0..w.ncols()).map(|c| w[(r, c)] as f64 * x[c]).sum())
                .collect(),
        )
    }
}
