use std::fmt;

use procmem_core::bank::{AdapterError, BankError};
use procmem_core::embed::EmbedError;
use procmem_core::extract::ExtractError;
use procmem_core::fuse::FuseError;
use procmem_core::matching::MatchError;
use procmem_core::schema::SchemaError;
use procmem_core::toybench::BenchError;
use serde::Serialize;

use crate::config::ConfigError;

/// Who is at fault, which decides the HTTP status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    /// The request broke a module contract (400).
    Contract,
    /// An upstream endpoint failed or misbehaved (502).
    Upstream,
    /// Everything else (500).
    Operational,
}

/// An error tagged with the module and variant that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub module: &'static str,
    pub kind: String,
    pub message: String,
    #[serde(skip)]
    pub class: Class,
}

impl Failure {
    pub fn new(module: &'static str, kind: impl Into<String>, class: Class, message: impl Into<String>) -> Self {
        Self {
            module,
            kind: kind.into(),
            message: message.into(),
            class,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}: {}", self.module, self.kind, self.message)
    }
}

impl std::error::Error for Failure {}

fn variant<T: fmt::Debug>(e: &T) -> String {
    let s = format!("{e:?}");
    s.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .next()
        .unwrap_or_default()
        .to_string()
}

fn tag<T: fmt::Debug + fmt::Display>(module: &'static str, class: Class, e: &T) -> Failure {
    Failure::new(module, variant(e), class, e.to_string())
}

impl From<EmbedError> for Failure {
    fn from(e: EmbedError) -> Self {
        let class = match e {
            EmbedError::EmptyText | EmbedError::UnknownVocabularyString(_) => Class::Contract,
            EmbedError::Cache(_) => Class::Operational,
            _ => Class::Upstream,
        };
        tag("embed", class, &e)
    }
}

impl From<MatchError> for Failure {
    fn from(e: MatchError) -> Self {
        match e {
            MatchError::Embed(inner) => inner.into(),
            other => tag("match", Class::Contract, &other),
        }
    }
}

impl From<AdapterError> for Failure {
    fn from(e: AdapterError) -> Self {
        tag("bank", Class::Operational, &e)
    }
}

impl From<BankError> for Failure {
    fn from(e: BankError) -> Self {
        match e {
            BankError::Match(inner) => inner.into(),
            BankError::Embed(inner) => inner.into(),
            BankError::Adapter { task_id, source } => {
                Failure::new("bank", variant(&source), Class::Operational, format!("adapter for {task_id}: {source}"))
            }
            BankError::UnknownTaskId(_)
            | BankError::InvalidTaskId(_)
            | BankError::DuplicateTaskId(_)
            | BankError::EmptyStateSequence(_) => tag("bank", Class::Contract, &e),
            other => tag("bank", Class::Operational, &other),
        }
    }
}

impl From<FuseError> for Failure {
    fn from(e: FuseError) -> Self {
        match e {
            FuseError::InvalidPlan(inner) => {
                let mut f: Failure = inner.into();
                f.module = "fuse";
                f
            }
            FuseError::IncompatibleAdapters(_) | FuseError::ShapeMismatch(_) | FuseError::PlanMismatch { .. } => {
                tag("fuse", Class::Contract, &e)
            }
            other => tag("fuse", Class::Operational, &other),
        }
    }
}

impl From<ExtractError> for Failure {
    fn from(e: ExtractError) -> Self {
        let class = match e {
            ExtractError::InvalidRequest(_) | ExtractError::NonMonotonicStep { .. } => Class::Contract,
            ExtractError::EndpointUnavailable(_) | ExtractError::ExtractionFailed { .. } => Class::Upstream,
        };
        tag("extract", class, &e)
    }
}

impl From<SchemaError> for Failure {
    fn from(e: SchemaError) -> Self {
        tag("schema", Class::Contract, &e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        tag("config", Class::Operational, &e)
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Bank(inner) => inner.into(),
            BenchError::Match(inner) => inner.into(),
            other => tag("toybench", Class::Operational, &other),
        }
    }
}
