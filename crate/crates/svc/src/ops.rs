//! Operations shared by the CLI and the HTTP service, so both return
//! identical results for identical inputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use procmem_core::bank::BankSnapshot;
use procmem_core::embed::Embedder;
use procmem_core::fuse::{fuse, FuseError, FusedAdapter, FusionMode};
use procmem_core::matching::{FusionPlan, Retrieval, DEFAULT_TEMPERATURE};
use procmem_core::schema::ProceduralState;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Class, Failure};

pub fn retrieve<E: Embedder + ?Sized>(
    snapshot: &BankSnapshot,
    embedder: &E,
    state: &ProceduralState,
    k: usize,
    temperature: f64,
    mode: FusionMode,
) -> Result<Retrieval, Failure> {
    let (results, mut plan) = snapshot.retrieve(state, k, temperature, embedder)?;
    plan.mode = mode;
    Ok(Retrieval::new(&results, plan))
}

/// Body of a fuse request; the `plan` object of a retrieval reply is
/// accepted as is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseRequest {
    pub selected: Vec<String>,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub mode: Option<FusionMode>,
    #[serde(default)]
    pub temperature: Option<f64>,
}

impl FuseRequest {
    pub fn into_plan(self, default_mode: FusionMode) -> Result<FusionPlan, Failure> {
        let plan = FusionPlan {
            selected: self.selected,
            weights: self.weights,
            mode: self.mode.unwrap_or(default_mode),
            temperature: self.temperature.unwrap_or(DEFAULT_TEMPERATURE),
        };
        plan.validate().map_err(FuseError::InvalidPlan)?;
        Ok(plan)
    }
}

pub fn fuse_plan(snapshot: &BankSnapshot, plan: &FusionPlan) -> Result<FusedAdapter, Failure> {
    let sets = snapshot.adapters_for(plan)?;
    Ok(fuse(plan, &sets)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub digest: String,
    pub adapter_id: String,
    pub mode: FusionMode,
    pub size_bytes: usize,
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new("fuse", "Io", Class::Operational, format!("{}: {e}", path.display()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_failure(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_failure(path, e))?;
    tmp.persist(path).map_err(|e| io_failure(path, e))?;
    Ok(())
}

/// Writes the fused adapter to `path` and returns its digest.
pub fn write_fused(fused: &FusedAdapter, path: &Path) -> Result<Artifact, Failure> {
    let bytes = fused.to_bytes()?;
    write_atomic(path, &bytes)?;
    Ok(Artifact {
        path: path.to_path_buf(),
        digest: hex::encode(Sha256::digest(&bytes)),
        adapter_id: fused.adapter_id(),
        mode: fused.mode(),
        size_bytes: bytes.len(),
    })
}

/// Writes under `dir/<sha256>.lora`; identical fusions share one file.
pub fn write_artifact(fused: &FusedAdapter, dir: &Path) -> Result<Artifact, Failure> {
    let bytes = fused.to_bytes()?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let path = dir.join(format!("{digest}.lora"));
    if !path.exists() {
        write_atomic(&path, &bytes)?;
    }
    Ok(Artifact {
        path,
        digest,
        adapter_id: fused.adapter_id(),
        mode: fused.mode(),
        size_bytes: bytes.len(),
    })
}
