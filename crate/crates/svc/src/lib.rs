//! Operator surface for procedural-memory banks: the `procmem` CLI and the
//! `/v1` HTTP service.

pub mod cli;
pub mod config;
pub mod error;
pub mod ops;
pub mod server;

pub use config::ServiceConfig;
pub use error::Failure;
