use std::collections::BTreeMap;

use thiserror::Error;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    /// Field name to diagnostic.
    #[error("validation failed: {0:?}")]
    Validation(BTreeMap<String, String>),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error(transparent)]
    Core(#[from] viraal_core::Error),

    #[error("storage: {0}")]
    Storage(String),
}

impl ServiceError {
    pub fn storage(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        ServiceError::Storage(format!("{context}: {e}"))
    }
}
