//! On-disk procedural-memory bank.
//!
//! A bank directory holds `bank.json` (the manifest), one adapter container per
//! memory under `adapters/<task_id>.lora`, and the embedding cache under
//! `cache/`. The manifest is rewritten atomically on every mutation.

mod adapter;
pub mod container;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adapter::{
    delta_name, down_name, read_adapter, up_name, write_adapter, AdapterSet, LayerFactors,
    TensorRole, DEFAULT_RANK, DEFAULT_SCALING_ALPHA,
};
pub(crate) use adapter::{from_matrix, write_file};
pub use container::Tensor;

use crate::embed::{EmbedCache, EmbedError, Embedder, EmbeddingService, EmbeddingVector, RetryPolicy};
use crate::matching::{rank_memories, select_top_k, FusionPlan, MatchError, MatchResult, PrecomputedEmbedder};
use crate::schema::{Field, ProceduralState, StateSequence};

pub const MANIFEST_FILE: &str = "bank.json";
pub const ADAPTER_DIR: &str = "adapters";
pub const CACHE_DIR: &str = "cache";
pub const ADAPTER_EXT: &str = "lora";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("I/O on {0}: {1}")]
    Io(String, #[source] io::Error),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("data offsets out of bounds: {0}")]
    OffsetOutOfBounds(String),
    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),
    #[error("pairing error: {0}")]
    PairingError(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("I/O on {0}: {1}")]
    Io(String, #[source] io::Error),
    #[error("bank already exists at {0}")]
    AlreadyExists(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("unsupported manifest version {0}")]
    UnsupportedVersion(u32),
    #[error("task id {0:?} is already registered")]
    DuplicateTaskId(String),
    #[error("unknown task id {0:?}")]
    UnknownTaskId(String),
    #[error("invalid task id {0:?}: use letters, digits, '-', '_' or '.'")]
    InvalidTaskId(String),
    #[error("memory {0:?} has no procedural states")]
    EmptyStateSequence(String),
    #[error("adapter for {task_id}: {source}")]
    Adapter {
        task_id: String,
        #[source]
        source: AdapterError,
    },
    #[error("bank expects embedding model {manifest:?}, embedder is {embedder:?}")]
    EmbedModelMismatch { manifest: String, embedder: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Match(#[from] MatchError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BankError + '_ {
    move |e| BankError::Io(path.display().to_string(), e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub task_id: String,
    pub states: Vec<ProceduralState>,
    /// Path of the adapter container, relative to the bank root.
    pub adapter_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precomputed: Option<BTreeMap<String, EmbeddingVector>>,
}

impl MemoryEntry {
    pub fn sequence(&self) -> Result<StateSequence, BankError> {
        StateSequence::new(self.task_id.clone(), self.states.clone())
            .ok_or_else(|| BankError::EmptyStateSequence(self.task_id.clone()))
    }

    /// Canonical field texts of every state, deduplicated.
    pub fn field_texts(&self) -> BTreeSet<String> {
        self.states
            .iter()
            .flat_map(|s| Field::ALL.iter().map(move |f| s.canonical_field_text(*f)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub version: u32,
    pub embed_model_id: String,
    #[serde(default)]
    pub memories: Vec<MemoryEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_adapter_ref: Option<String>,
}

impl BankManifest {
    pub fn new(embed_model_id: impl Into<String>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            embed_model_id: embed_model_id.into(),
            memories: Vec::new(),
            base_adapter_ref: None,
        }
    }

    pub fn check(&self) -> Result<(), BankError> {
        if self.version != MANIFEST_VERSION {
            return Err(BankError::UnsupportedVersion(self.version));
        }
        let mut seen = BTreeSet::new();
        for m in &self.memories {
            check_task_id(&m.task_id)?;
            if !seen.insert(m.task_id.as_str()) {
                return Err(BankError::DuplicateTaskId(m.task_id.clone()));
            }
            if m.states.is_empty() {
                return Err(BankError::EmptyStateSequence(m.task_id.clone()));
            }
            if let Some(pre) = &m.precomputed {
                if let Some(missing) = m.field_texts().into_iter().find(|t| !pre.contains_key(t)) {
                    return Err(BankError::Manifest(format!(
                        "{}: precomputed embeddings lack {missing:?}",
                        m.task_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn memory(&self, task_id: &str) -> Option<&MemoryEntry> {
        self.memories.iter().find(|m| m.task_id == task_id)
    }
}

fn check_task_id(id: &str) -> Result<(), BankError> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(BankError::InvalidTaskId(id.to_string()))
    }
}

/// Handle on a bank directory. Mutations require `&mut self`; readers work
/// from a [`BankSnapshot`].
#[derive(Debug)]
pub struct Bank {
    root: PathBuf,
    manifest: BankManifest,
}

impl Bank {
    pub fn init(root: impl Into<PathBuf>, embed_model_id: &str) -> Result<Self, BankError> {
        let root = root.into();
        let manifest_path = root.join(MANIFEST_FILE);
        if manifest_path.exists() {
            return Err(BankError::AlreadyExists(root.display().to_string()));
        }
        let adapters = root.join(ADAPTER_DIR);
        fs::create_dir_all(&adapters).map_err(io_err(&adapters))?;
        let bank = Self {
            root,
            manifest: BankManifest::new(embed_model_id),
        };
        bank.persist(&bank.manifest)?;
        Ok(bank)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, BankError> {
        let root = root.into();
        let path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let manifest: BankManifest =
            serde_json::from_slice(&bytes).map_err(|e| BankError::Manifest(e.to_string()))?;
        manifest.check()?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &BankManifest {
        &self.manifest
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join(CACHE_DIR)
    }

    /// An [`EmbeddingService`] backed by this bank's persistent cache.
    pub fn embedding_service(&self, backend: Arc<dyn Embedder>, retry: RetryPolicy) -> Result<EmbeddingService, BankError> {
        let dir = self.cache_dir();
        let cache = EmbedCache::persistent(&dir).map_err(io_err(&dir))?;
        Ok(EmbeddingService::new(backend, cache, retry))
    }

    pub fn resolve(&self, reference: &str) -> PathBuf {
        let p = Path::new(reference);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn persist(&self, manifest: &BankManifest) -> Result<(), BankError> {
        let path = self.root.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(manifest).map_err(|e| BankError::Manifest(e.to_string()))?;
        bytes.push(b'\n');
        crate::fsutil::write_atomic(&self.root, &path, &bytes).map_err(io_err(&path))
    }

    fn adapter_ref_for(task_id: &str) -> String {
        format!("{ADAPTER_DIR}/{task_id}.{ADAPTER_EXT}")
    }

    /// Validates and copies an adapter into the bank, then appends the memory.
    /// On any failure the manifest on disk is left as it was.
    pub fn register_memory(
        &mut self,
        task_id: &str,
        states: Vec<ProceduralState>,
        adapter_path: impl AsRef<Path>,
    ) -> Result<(), BankError> {
        check_task_id(task_id)?;
        if self.manifest.memory(task_id).is_some() {
            return Err(BankError::DuplicateTaskId(task_id.to_string()));
        }
        if states.is_empty() {
            return Err(BankError::EmptyStateSequence(task_id.to_string()));
        }
        let adapter_err = |source| BankError::Adapter {
            task_id: task_id.to_string(),
            source,
        };
        let set = read_adapter(adapter_path.as_ref()).map_err(adapter_err)?;
        let adapter_ref = Self::adapter_ref_for(task_id);
        let dest = self.resolve(&adapter_ref);
        let adapters = self.root.join(ADAPTER_DIR);
        fs::create_dir_all(&adapters).map_err(io_err(&adapters))?;
        write_adapter(&set, &dest).map_err(adapter_err)?;

        let mut next = self.manifest.clone();
        next.memories.push(MemoryEntry {
            task_id: task_id.to_string(),
            states,
            adapter_ref,
            precomputed: None,
        });
        if let Err(e) = self.persist(&next) {
            let _ = fs::remove_file(&dest);
            return Err(e);
        }
        self.manifest = next;
        Ok(())
    }

    pub fn set_base_adapter(&mut self, adapter_path: impl AsRef<Path>) -> Result<(), BankError> {
        let err = |source| BankError::Adapter {
            task_id: "<base>".into(),
            source,
        };
        let set = read_adapter(adapter_path.as_ref()).map_err(err)?;
        let reference = format!("{ADAPTER_DIR}/base.{ADAPTER_EXT}");
        write_adapter(&set, self.resolve(&reference)).map_err(err)?;
        let mut next = self.manifest.clone();
        next.base_adapter_ref = Some(reference);
        self.persist(&next)?;
        self.manifest = next;
        Ok(())
    }

    pub fn load_adapter(&self, task_id: &str) -> Result<AdapterSet, BankError> {
        let m = self
            .manifest
            .memory(task_id)
            .ok_or_else(|| BankError::UnknownTaskId(task_id.to_string()))?;
        read_adapter(self.resolve(&m.adapter_ref)).map_err(|source| BankError::Adapter {
            task_id: task_id.to_string(),
            source,
        })
    }

    /// Embeds every distinct canonical field text not yet stored in the
    /// manifest and records the vectors in each entry. Returns how many
    /// distinct texts were newly embedded. Progress made before an error is
    /// still written out.
    pub fn precompute_embeddings<E: Embedder + ?Sized>(&mut self, embedder: &E) -> Result<usize, BankError> {
        if embedder.model_id() != self.manifest.embed_model_id {
            return Err(BankError::EmbedModelMismatch {
                manifest: self.manifest.embed_model_id.clone(),
                embedder: embedder.model_id().to_string(),
            });
        }
        let mut known: BTreeMap<String, EmbeddingVector> = BTreeMap::new();
        let mut missing: BTreeSet<String> = BTreeSet::new();
        for m in &self.manifest.memories {
            let pre = m.precomputed.as_ref();
            for text in m.field_texts() {
                match pre.and_then(|p| p.get(&text)) {
                    Some(v) if v.model_id == embedder.model_id() => {
                        known.insert(text, v.clone());
                    }
                    _ => {
                        missing.insert(text);
                    }
                }
            }
        }
        missing.retain(|t| !known.contains_key(t));

        let mut embedded = 0usize;
        let mut failure = None;
        for text in &missing {
            match embedder.embed(text) {
                Ok(v) => {
                    known.insert(text.clone(), v);
                    embedded += 1;
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }

        let mut next = self.manifest.clone();
        for m in &mut next.memories {
            let texts = m.field_texts();
            if texts.iter().all(|t| known.contains_key(t)) {
                m.precomputed = Some(texts.into_iter().map(|t| {
                    let v = known[&t].clone();
                    (t, v)
                }).collect());
            }
        }
        if next != self.manifest {
            self.persist(&next)?;
            self.manifest = next;
        }
        match failure {
            Some(e) => Err(e.into()),
            None => Ok(embedded),
        }
    }

    pub fn validate(&self) -> ValidationReport {
        validate_bank(self)
    }

    /// Loads every adapter and state sequence into an immutable snapshot.
    pub fn snapshot(&self) -> Result<BankSnapshot, BankError> {
        let mut memories = Vec::with_capacity(self.manifest.memories.len());
        let mut adapters = BTreeMap::new();
        let mut precomputed = HashMap::new();
        for m in &self.manifest.memories {
            memories.push(m.sequence()?);
            adapters.insert(m.task_id.clone(), Arc::new(self.load_adapter(&m.task_id)?));
            if let Some(pre) = &m.precomputed {
                for (t, v) in pre {
                    precomputed.insert(t.clone(), v.clone());
                }
            }
        }
        let base_adapter = match &self.manifest.base_adapter_ref {
            Some(r) => Some(Arc::new(read_adapter(self.resolve(r)).map_err(|source| {
                BankError::Adapter {
                    task_id: "<base>".into(),
                    source,
                }
            })?)),
            None => None,
        };
        Ok(BankSnapshot {
            manifest: self.manifest.clone(),
            memories,
            adapters,
            base_adapter,
            precomputed,
        })
    }
}

/// Immutable in-memory view of a bank, shareable across threads.
#[derive(Debug, Clone)]
pub struct BankSnapshot {
    pub manifest: BankManifest,
    pub memories: Vec<StateSequence>,
    pub adapters: BTreeMap<String, Arc<AdapterSet>>,
    pub base_adapter: Option<Arc<AdapterSet>>,
    pub precomputed: HashMap<String, EmbeddingVector>,
}

impl BankSnapshot {
    pub fn len(&self) -> usize {
        self.memories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memories.is_empty()
    }

    /// Scores all memories for `query`, serving memory-side vectors from the
    /// precomputed table when available.
    pub fn match_all<E: Embedder + ?Sized>(
        &self,
        query: &ProceduralState,
        embedder: &E,
    ) -> Result<Vec<MatchResult>, BankError> {
        let lookup = PrecomputedEmbedder::new(&self.precomputed, embedder);
        Ok(rank_memories(query, &self.memories, &lookup)?)
    }

    pub fn retrieve<E: Embedder + ?Sized>(
        &self,
        query: &ProceduralState,
        k: usize,
        temperature: f64,
        embedder: &E,
    ) -> Result<(Vec<MatchResult>, FusionPlan), BankError> {
        if self.memories.is_empty() {
            return Err(MatchError::EmptyBank.into());
        }
        let results = self.match_all(query, embedder)?;
        let plan = select_top_k(&results, k, temperature)?;
        Ok((results, plan))
    }

    /// Adapters for the plan's selection, in plan order.
    pub fn adapters_for(&self, plan: &FusionPlan) -> Result<Vec<Arc<AdapterSet>>, BankError> {
        plan.selected
            .iter()
            .map(|id| {
                self.adapters
                    .get(id)
                    .cloned()
                    .ok_or_else(|| BankError::UnknownTaskId(id.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub task_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub memories: usize,
    pub findings: Vec<Finding>,
    /// All adapters share tensor names, ranks and shapes.
    pub factor_fusable: bool,
    /// All adapters agree on per-layer `(d_out, d_in)`.
    pub delta_fusable: bool,
}

impl ValidationReport {
    pub fn has_errors(&self) -> bool {
        self.findings.iter().any(|f| f.severity == Severity::Error)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "memories: {}", self.memories)?;
        for finding in &self.findings {
            let tag = match finding.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
            };
            match &finding.task_id {
                Some(t) => writeln!(f, "{tag}: [{t}] {}", finding.message)?,
                None => writeln!(f, "{tag}: {}", finding.message)?,
            }
        }
        if self.factor_fusable {
            write!(f, "factor-fusable: yes")
        } else if self.delta_fusable {
            write!(f, "factor-fusable: no; delta-only")
        } else {
            write!(f, "factor-fusable: no; delta-fusable: no")
        }
    }
}

pub fn validate_bank(bank: &Bank) -> ValidationReport {
    let mut findings = Vec::new();
    let mut push = |severity, task_id: Option<&str>, message: String| {
        findings.push(Finding {
            severity,
            task_id: task_id.map(str::to_string),
            message,
        })
    };
    let manifest = bank.manifest();
    if let Err(e) = manifest.check() {
        push(Severity::Error, None, e.to_string());
    }

    let mut loaded: Vec<(String, AdapterSet)> = Vec::new();
    for m in &manifest.memories {
        let path = bank.resolve(&m.adapter_ref);
        if !path.exists() {
            push(
                Severity::Error,
                Some(&m.task_id),
                format!("dangling adapter_ref {}", m.adapter_ref),
            );
            continue;
        }
        match read_adapter(&path) {
            Ok(set) => loaded.push((m.task_id.clone(), set)),
            Err(e) => push(Severity::Error, Some(&m.task_id), e.to_string()),
        }
    }
    if let Some(r) = &manifest.base_adapter_ref {
        if let Err(e) = read_adapter(bank.resolve(r)) {
            push(Severity::Error, None, format!("base adapter {r}: {e}"));
        }
    }

    let mut factor_fusable = true;
    let mut delta_fusable = true;
    if let Some((ref_id, reference)) = loaded.first() {
        let ref_dims = reference.layer_dims();
        for (id, set) in &loaded[1..] {
            if !reference.factor_compatible(set) {
                factor_fusable = false;
                let why = if set.rank() != reference.rank() {
                    format!("rank {} differs from {ref_id}'s rank {}", set.rank(), reference.rank())
                } else if set.scaling_alpha() != reference.scaling_alpha() {
                    format!(
                        "scaling_alpha {} differs from {ref_id}'s {}",
                        set.scaling_alpha(),
                        reference.scaling_alpha()
                    )
                } else {
                    format!("tensor names or shapes differ from {ref_id}")
                };
                push(Severity::Warning, Some(id), format!("{why}; factor fusion disabled"));
            }
            if set.layer_dims() != ref_dims {
                delta_fusable = false;
                push(
                    Severity::Error,
                    Some(id),
                    format!("layer dimensions differ from {ref_id}; adapters cannot be fused"),
                );
            }
        }
    }
    ValidationReport {
        memories: manifest.memories.len(),
        findings,
        factor_fusable,
        delta_fusable,
    }
}
