//! Annotation backend for human-in-the-loop active learning.
//!
//! An operator opens a round; the pool is scored with the current
//! checkpoint and the least confident utterances are queued as tasks.
//! Annotators lease tasks, submit labels or skip, and once nothing is
//! pending a retrain produces the next checkpoint. Every change is an
//! event in an append-only log under the data directory.

pub mod api;
pub mod error;
pub mod service;
pub mod state;
pub mod store;

pub use error::{Result, ServiceError};
pub use service::{Service, ServiceConfig};

/// Milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
