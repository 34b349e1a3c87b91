use std::path::PathBuf;

use thiserror::Error;

use crate::model::Phase;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("event {event} is not allowed in phase {phase:?}")]
    Phase { phase: Phase, event: String },

    #[error("invalid usage: {0}")]
    Usage(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("backend protocol error: {0}")]
    Protocol(String),

    #[error("could not parse generated clarifications after {attempts} attempts")]
    Generation { attempts: usize, raw: String },

    #[error("no training questions for domain {domain_id} ({name})")]
    MissingClass { domain_id: u8, name: String },

    #[error("report is missing sections after {attempts} attempts: {missing:?}")]
    ReportFormat { attempts: usize, missing: Vec<String> },

    #[error("judge verdict unusable after {attempts} attempts: {last_reply}")]
    Judge { attempts: usize, last_reply: String },

    #[error("session {0} not found")]
    NotFound(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),

    /// Injected by the store's fail point to simulate a process dying mid-operation.
    #[error("simulated crash before append #{0}")]
    SimulatedCrash(u64),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::BackendUnavailable(_))
    }
}

/// Non-fatal conditions an operation records and keeps going.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    Truncation { index: usize, chars: usize, limit: usize },
    ClampedK { requested: usize, available: usize },
    DuplicateCase { case_id: String, line: usize },
    CandidateFailed { index: usize, error: String },
    TornLogTail { line: usize },
}
