//! File formats, reports and IO around `fieldscope-core`.
//!
//! The interchange format for messages, traces and ground truth is described
//! in [`textfmt`]. Formats, annotations, clusterings and metrics are written as
//! JSON using the core types' serde representation.

pub mod report;
pub mod textfmt;

use std::fs;
use std::path::{Path, PathBuf};

use fieldscope_core::vm::{assemble, bundled, AsmError, ParserScript};
use fieldscope_core::GroundTruth;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub use textfmt::{parse_corpus, parse_truth, serialize_corpus, serialize_truth, Corpus, FormatError};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: {source}", path.display())]
    Asm { path: PathBuf, source: AsmError },
}

fn read(path: &Path) -> Result<String, LoadError> {
    fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.into(), source })
}

/// Reads messages and traces from an interchange file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, LoadError> {
    let path = path.as_ref();
    parse_corpus(&read(path)?).map_err(|source| LoadError::Format { path: path.into(), source })
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<GroundTruth, LoadError> {
    let path = path.as_ref();
    parse_truth(&read(path)?).map_err(|source| LoadError::Format { path: path.into(), source })
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, LoadError> {
    let path = path.as_ref();
    serde_json::from_str(&read(path)?).map_err(|source| LoadError::Json { path: path.into(), source })
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("core types serialize");
    s.push('\n');
    s
}

/// A bundled parser name, or a path to an assembly file.
pub fn load_script(name_or_path: &str) -> Result<ParserScript, LoadError> {
    if let Some(p) = bundled::find(name_or_path) {
        return Ok(p.script);
    }
    let path = Path::new(name_or_path);
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("script");
    assemble(stem, &read(path)?).map_err(|source| LoadError::Asm { path: path.into(), source })
}
