use std::path::{Path, PathBuf};

use cct_core::model::CctConfig;
use cct_core::trainer::{Normalization, TrainConfig};
use cct_core::{CctError, Result};
use serde::{Deserialize, Serialize};

/// Where the images come from and how pixels are scaled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Relative paths resolve against the config file's directory.
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Must match `model.in_channels` when given.
    pub channels: Option<usize>,
    pub normalization: Normalization,
}

/// One JSON document with `model`, `train` and `data` sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: CctConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfigFile {
    /// Parse and check everything except tokenizer geometry, which callers
    /// report themselves.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CctError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfigFile =
            serde_json::from_str(&text).map_err(|e| CctError::Parameter(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train_manifest, &mut cfg.data.test_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.train.validate().map_err(|e| CctError::Parameter(format!("config {} train section: {e}", path.display())))?;
        if let Some(c) = cfg.data.channels {
            if c != cfg.model.in_channels {
                return Err(CctError::Parameter(format!(
                    "config {}: data.channels {c} differs from model.in_channels {}",
                    path.display(),
                    cfg.model.in_channels
                )));
            }
        }
        if !(cfg.data.normalization.std > 0.0) {
            return Err(CctError::Parameter(format!("config {}: data.normalization.std must be positive", path.display())));
        }
        Ok(cfg)
    }

    /// Manifest paths, with command-line overrides taking precedence.
    pub fn manifests(&self, train: Option<&Path>, test: Option<&Path>) -> Result<(PathBuf, PathBuf)> {
        let pick = |flag: Option<&Path>, file: &Option<PathBuf>, name: &str| {
            flag.map(Path::to_path_buf)
                .or_else(|| file.clone())
                .ok_or_else(|| CctError::Usage(format!("no {name} manifest: set data.{name}_manifest or pass --{name}-manifest")))
        };
        Ok((pick(train, &self.data.train_manifest, "train")?, pick(test, &self.data.test_manifest, "test")?))
    }
}
