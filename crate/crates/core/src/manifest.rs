//! Run manifest: the inputs, seeds, and versions that produced an output file.
//!
//! Every file the pipeline writes carries one, as a JSON object in JSON
//! outputs and as `#` comment lines in CSV and SVG outputs. Nothing
//! time-dependent goes in, so reruns stay byte-identical.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CctError, Result};

pub const GENERATOR: &str = concat!("cct ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunManifest {
    pub entries: IndexMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut entries = IndexMap::new();
        entries.insert("generator".to_string(), GENERATOR.to_string());
        entries.insert("command".to_string(), command.to_string());
        RunManifest { entries }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.set(key, value);
        self
    }

    /// Record an input file as `key: path` plus `key_sha256: digest`.
    pub fn with_input(self, key: &str, path: &Path) -> Result<Self> {
        let digest = file_sha256(path)?;
        Ok(self.with(key, path.display()).with(&format!("{key}_sha256"), digest))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// `{prefix}key: value` lines, newlines in values escaped.
    pub fn comment_lines(&self, prefix: &str) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(prefix);
            out.push_str(k);
            out.push_str(": ");
            out.push_str(&v.replace('\n', "\\n"));
            out.push('\n');
        }
        out
    }

    /// Inverse of [`comment_lines`](Self::comment_lines) for lines starting with `prefix`.
    pub fn from_comment_lines(text: &str, prefix: &str) -> Self {
        let mut entries = IndexMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.strip_prefix(prefix).and_then(|rest| rest.split_once(": ")) {
                entries.insert(k.to_string(), v.replace("\\n", "\n"));
            }
        }
        RunManifest { entries }
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CctError::io(format!("reading {}", path.display()), e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
