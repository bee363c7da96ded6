//! Labeled image manifests, image loading, and the three train/test split
//! policies.
//!
//! A manifest is a CSV file with header `path,label`; `label` is `positive`
//! or `negative` and `path` is relative to the manifest's directory. The path
//! as written is the sample id.

mod image;
mod policy;


use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CctError, Result};
use crate::rng::RngStream;

pub use self::image::{bilinear_resize, load_image};
pub use policy::{carve_validation, policy1, policy2, policy3, policy3_move_count, PolicyKind, SplitOptions, SplitPlan, SPLIT_PLAN_FORMAT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Positive, Label::Negative];

    /// Category index used by the classifier head: negative 0, positive 1.
    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Negative),
            1 => Some(Label::Positive),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "positive" => Some(Label::Positive),
            "negative" => Some(Label::Negative),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    OfficialTrain,
    OfficialTest,
    Merged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    pub origin: Origin,
    pub samples: Vec<Sample>,
}

/// Whether [`parse_manifest`] requires each referenced file to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileCheck {
    Exists,
    Skip,
}

impl LabeledDataset {
    /// Build from samples, rejecting duplicate ids.
    pub fn new(origin: Origin, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(CctError::Data(format!("duplicate sample id {:?}", s.id)));
            }
        }
        Ok(LabeledDataset { origin, samples })
    }

    /// `n_pos` positives followed by `n_neg` negatives with ids `{prefix}{i}`.
    /// Paths are not real files.
    pub fn synthetic_ids(origin: Origin, prefix: &str, n_pos: usize, n_neg: usize) -> Self {
        let samples = (0..n_pos + n_neg)
            .map(|i| Sample {
                id: format!("{prefix}{i}"),
                path: PathBuf::from(format!("{prefix}{i}")),
                label: if i < n_pos { Label::Positive } else { Label::Negative },
            })
            .collect();
        LabeledDataset { origin, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// (positives, negatives)
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.samples.iter().filter(|s| s.label == Label::Positive).count();
        (pos, self.samples.len() - pos)
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Concatenation of two datasets; ids must not collide.
    pub fn merge(a: &LabeledDataset, b: &LabeledDataset) -> Result<LabeledDataset> {
        let mut samples = a.samples.clone();
        samples.extend(b.samples.iter().cloned());
        LabeledDataset::new(Origin::Merged, samples).map_err(|_| overlap_error(a, b))
    }

    /// SHA-256 over `id\tlabel\n` lines in order; identifies the input of a split.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.id.as_bytes());
            h.update(b"\t");
            h.update(s.label.as_str().as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn overlap_error(a: &LabeledDataset, b: &LabeledDataset) -> CctError {
    let ids: HashSet<&str> = a.samples.iter().map(|s| s.id.as_str()).collect();
    let first = b.samples.iter().find(|s| ids.contains(s.id.as_str()));
    CctError::Data(format!("train and test manifests overlap (e.g. {:?})", first.map(|s| s.id.as_str()).unwrap_or("?")))
}

/// Parse manifest text. Row numbers in errors count the header as row 1.
pub fn parse_manifest(text: &str, base_dir: &Path, origin: Origin, check: FileCheck) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "path" || &headers[1] != "label" {
        return Err(CctError::Data(format!(
            "manifest row 1: expected header path,label, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| CctError::Data(format!("manifest row {row}: {e}")))?;
        let (path, label) = (&record[0], &record[1]);
        let label = Label::parse(label)
            .ok_or_else(|| CctError::Data(format!("manifest row {row}: unknown label {label:?} (expected positive or negative)")))?;
        if path.is_empty() {
            return Err(CctError::Data(format!("manifest row {row}: empty path")));
        }
        if !seen.insert(path.to_string()) {
            return Err(CctError::Data(format!("manifest row {row}: duplicate path {path:?}")));
        }
        let full = base_dir.join(path);
        if check == FileCheck::Exists && !full.is_file() {
            return Err(CctError::Data(format!("manifest row {row}: missing file {}", full.display())));
        }
        samples.push(Sample { id: path.to_string(), path: full, label });
    }
    Ok(LabeledDataset { origin, samples })
}

/// Read a manifest file; referenced images must exist but are not decoded.
pub fn ingest(manifest_path: &Path, origin: Origin) -> Result<LabeledDataset> {
    let text =
        std::fs::read_to_string(manifest_path).map_err(|e| CctError::io(format!("reading manifest {}", manifest_path.display()), e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, origin, FileCheck::Exists).map_err(|e| match e {
        CctError::Data(msg) => CctError::Data(format!("{}: {msg}", manifest_path.display())),
        other => other,
    })
}

/// Seeded Fisher-Yates permutation of the samples.
pub fn shuffle(dataset: &LabeledDataset, seed: u64) -> LabeledDataset {
    let mut samples = dataset.samples.clone();
    RngStream::new(seed).shuffle(&mut samples);
    LabeledDataset { origin: dataset.origin, samples }
}
