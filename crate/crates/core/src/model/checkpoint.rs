//! Text checkpoint format.
//!
//! ```text
//! cct-checkpoint
//! format_version: 1
//! dtype: f32le
//! config: {"image_size":[32,32],...}
//! meta.seed: 7
//! tensor: tokenizer.stage0.kernel 8x1x3x3 <sha256 of raw bytes>
//! ...
//! manifest_sha256: <sha256 of every line above, newline-terminated>
//! buffers:
//! <base64 of tensor 0>
//! ...
//! end
//! ```
//!
//! Buffers are little-endian `f32` in declaration order, one base64 line each.

use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{CctError, Result};
use crate::numerics::{Element, Tensor};

use super::config::CctConfig;
use super::params::{param_specs, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "cct-checkpoint";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: CctConfig,
    pub params: ModelParams<f64>,
    /// Free-form run manifest (seed, inputs, versions).
    pub meta: IndexMap<String, String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split('x').map(|p| p.parse().ok()).collect()
}

/// Serialize to a string. Values are stored as `f32`.
pub fn write_checkpoint<T: Element>(params: &ModelParams<T>, config: &CctConfig, meta: &IndexMap<String, String>) -> Result<String> {
    let mut manifest = String::new();
    manifest.push_str(&format!("{MAGIC}\nformat_version: {CHECKPOINT_VERSION}\ndtype: f32le\n"));
    manifest.push_str(&format!("config: {}\n", serde_json::to_string(config)?));
    for (k, v) in meta {
        if k.contains([':', '\n']) || v.contains('\n') {
            return Err(CctError::Usage(format!("checkpoint metadata {k:?} must be a single line without ':' in the key")));
        }
        manifest.push_str(&format!("meta.{k}: {v}\n"));
    }
    let mut buffers = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect();
        manifest.push_str(&format!("tensor: {name} {} {}\n", shape_str(t.shape()), sha256_hex(&bytes)));
        buffers.push(STANDARD.encode(&bytes));
    }
    let digest = sha256_hex(manifest.as_bytes());
    let mut out = manifest;
    out.push_str(&format!("manifest_sha256: {digest}\nbuffers:\n"));
    for b in buffers {
        out.push_str(&b);
        out.push('\n');
    }
    out.push_str("end\n");
    Ok(out)
}

struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    sha: String,
}

/// Parse and verify a checkpoint. Parameters come back as `f64`.
pub fn read_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut lines = text.split_inclusive('\n');
    let mut manifest = String::new();
    let mut next = |what: &str| lines.next().ok_or_else(|| CctError::CheckpointTruncated(format!("file ends before {what}")));
    let integrity = |m: String| CctError::CheckpointIntegrity(m);

    let magic = next("header")?;
    if magic.trim_end() != MAGIC {
        return Err(integrity(format!("not a checkpoint (first line {:?})", magic.trim_end())));
    }
    manifest.push_str(magic);
    let version_line = next("format_version")?;
    manifest.push_str(version_line);
    let found = version_line.trim_end().strip_prefix("format_version: ").ok_or_else(|| integrity("missing format_version line".into()))?;
    if found.parse::<u32>().ok() != Some(CHECKPOINT_VERSION) {
        return Err(CctError::CheckpointVersion { found: found.to_string(), expected: CHECKPOINT_VERSION });
    }

    let mut config: Option<CctConfig> = None;
    let mut meta = IndexMap::new();
    let mut entries = Vec::new();
    loop {
        let line = next("manifest_sha256")?;
        let body = line.trim_end_matches(['\n', '\r']);
        if let Some(d) = body.strip_prefix("manifest_sha256: ") {
            if sha256_hex(manifest.as_bytes()) != d {
                return Err(integrity("manifest checksum mismatch".into()));
            }
            break;
        }
        manifest.push_str(line);
        let (key, value) = body.split_once(": ").ok_or_else(|| integrity(format!("malformed manifest line {body:?}")))?;
        match key {
            "dtype" if value == "f32le" => {}
            "dtype" => return Err(integrity(format!("unsupported dtype {value}"))),
            "config" => config = Some(serde_json::from_str(value)?),
            "tensor" => {
                let parts: Vec<&str> = value.split(' ').collect();
                let [name, shape, sha] = parts[..] else {
                    return Err(integrity(format!("malformed tensor line {body:?}")));
                };
                let shape = parse_shape(shape).ok_or_else(|| integrity(format!("bad shape in {body:?}")))?;
                entries.push(TensorEntry { name: name.to_string(), shape, sha: sha.to_string() });
            }
            k => match k.strip_prefix("meta.") {
                Some(m) => {
                    meta.insert(m.to_string(), value.to_string());
                }
                None => return Err(integrity(format!("unknown manifest key {k}"))),
            },
        }
    }
    if next("buffers")?.trim_end() != "buffers:" {
        return Err(integrity("missing buffers section".into()));
    }
    let config = config.ok_or_else(|| integrity("manifest has no config".into()))?;

    let plan = config.validate()?;
    let specs = param_specs(&config, &plan);
    if specs.len() != entries.len() {
        return Err(integrity(format!("{} tensors stored but the config declares {}", entries.len(), specs.len())));
    }
    let mut params = ModelParams::new();
    for (spec, entry) in specs.iter().zip(&entries) {
        if spec.name != entry.name {
            return Err(integrity(format!("tensor {} stored where {} expected", entry.name, spec.name)));
        }
        if spec.shape != entry.shape {
            return Err(CctError::CheckpointShape { name: entry.name.clone(), expected: spec.shape.clone(), found: entry.shape.clone() });
        }
        let line = next(&format!("buffer for {}", entry.name))?;
        if !line.ends_with('\n') {
            return Err(CctError::CheckpointTruncated(format!("buffer for {} is cut short", entry.name)));
        }
        let bytes =
            STANDARD.decode(line.trim_end()).map_err(|e| integrity(format!("buffer for {} is not valid base64: {e}", entry.name)))?;
        if sha256_hex(&bytes) != entry.sha {
            return Err(integrity(format!("checksum mismatch in buffer for {}", entry.name)));
        }
        if bytes.len() != 4 * spec.numel() {
            return Err(integrity(format!("buffer for {} has {} bytes", entry.name, bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    if next("end marker")?.trim_end() != "end" {
        return Err(integrity("missing end marker".into()));
    }
    Ok(Checkpoint { config, params, meta })
}

pub fn save_checkpoint<T: Element>(
    params: &ModelParams<T>,
    config: &CctConfig,
    meta: &IndexMap<String, String>,
    path: &Path,
) -> Result<()> {
    let text = write_checkpoint(params, config, meta)?;
    let mut f = fs::File::create(path).map_err(|e| CctError::io(format!("creating {}", path.display()), e))?;
    f.write_all(text.as_bytes()).map_err(|e| CctError::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| CctError::io(format!("reading {}", path.display()), e))?;
    read_checkpoint(&text)
}
