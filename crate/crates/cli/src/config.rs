//! Run configuration: defaults, overlaid by a TOML file, overlaid by flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pnfer_core::corpus::GeneratorConfig;
use pnfer_core::eval::ZeroShotConfig;
use pnfer_core::fusion::SimilarityMode;
use pnfer_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub mode: SimilarityMode,
    pub split: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            mode: SimilarityMode::PnDiff,
            split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSettings {
    pub jobs: usize,
    /// Restrict the grid to these cell ids; empty means every cell.
    pub cells: Vec<String>,
}

impl Default for AblateSettings {
    fn default() -> Self {
        AblateSettings { jobs: 1, cells: Vec::new() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds corpus generation, initialisation and shuffling.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub zeroshot: ZeroShotConfig,
    pub eval: EvalSettings,
    pub ablate: AblateSettings,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Copies the shared seed into every consumer.
    pub fn finish(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.zeroshot.train.seed = self.seed;
        self.train.validate()?;
        self.zeroshot.train.validate()?;
        self.generator.validate()?;
        Ok(self)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Resolves `path` against the working-directory root.
pub fn under(workdir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        workdir.join(path)
    }
}
