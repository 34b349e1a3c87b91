//! Orchestration engine for a multi-agent legal consultation pipeline.
//!
//! A receptionist routes the client's first question to a domain, a lawyer
//! agent answers with domain-specific personas and can pause to build a
//! tree of clarifying questions the client marks yes or no, a secretary
//! compiles the dialogue into a nine-section report, and a boss reward model
//! picks among candidate replies and reviews the report. Every agent talks
//! to pluggable chat and embedding backends; [`backend::mock`] is fully
//! deterministic.

pub mod backend;
pub mod boss;
pub mod case_bank;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod lawyer;
pub mod model;
pub mod orchestrator;
pub mod receptionist;
pub mod secretary;
pub mod tolc;
pub mod vector;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use error::{Error, Result, Warning};

/// Writes pretty JSON through a temporary file and a rename.
pub fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let mut body = serde_json::to_vec_pretty(value)?;
    body.push(b'\n');
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&body)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
