//! Procedural-memory engine for adaptive policies.
//!
//! Memories pair a sequence of structured procedural states with a low-rank
//! adapter. At runtime the current state is extracted from the observation,
//! the most relevant memories are retrieved with action-aware field-weighted
//! similarity, their adapters are fused with softmax coefficients, and the
//! fused adapter is applied around a single action chunk.

pub mod bank;
pub mod embed;
pub mod extract;
mod fsutil;
pub mod fuse;
pub mod matching;
pub mod runtime;
pub mod schema;
pub mod toybench;

pub use bank::{AdapterSet, Bank, BankManifest, MemoryEntry};
pub use embed::{cosine, Embedder, EmbeddingVector};
pub use fuse::{FusedAdapter, FusionMode, ParameterHost};
pub use matching::{FusionPlan, MatchResult, WeightProfile};
pub use schema::{Action, EeOrientation, EntityShape, Field, ProceduralState, TargetPoint};
