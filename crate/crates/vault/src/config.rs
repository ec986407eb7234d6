//! The JSON run configuration.
//!
//! ```json
//! {
//!   "model": { "d_vlm": 32, "d_lm": 32, "vlm_depth": 1, "lm_depth": 1 },
//!   "train": { "peak_lr": 2e-4, "epochs": 15, "mlm_pretrain": true },
//!   "data":  { "manifest": "fixture/manifest.jsonl", "vlm_vocab_fraction": 0.1 }
//! }
//! ```
//!
//! Every section and field is optional and unknown keys are rejected. The
//! model's language/visual modes and vocabulary sizes are set by the
//! command that runs it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vault_core::train::TrainConfig;
use vault_core::vlm::ModelConfig;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL manifest; relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
    /// Apply tweet normalization to texts and targets.
    pub normalize: bool,
    /// `sequence<TAB>description` table used by normalization.
    pub emoji_table: Option<PathBuf>,
    /// Side of the square crop fed to the model; overrides
    /// `model.image_size` when set.
    pub crop_size: Option<usize>,
    pub split_seed: u64,
    /// Share of the training texts, taken in split order, that the VLM's own
    /// vocabulary is built from. The LM vocabulary always sees all of them.
    pub vlm_vocab_fraction: f64,
    pub max_vocab: usize,
    pub lm_placeholder_token: bool,
    pub vlm_placeholder_token: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            normalize: false,
            emoji_table: None,
            crop_size: None,
            split_seed: 0,
            vlm_vocab_fraction: 1.0,
            max_vocab: 512,
            lm_placeholder_token: true,
            vlm_placeholder_token: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<RunConfig> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::format(path, e))?;
        let absolute = std::path::absolute(path).map_err(Error::io(path))?;
        let base = absolute.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.manifest, &mut cfg.data.emoji_table].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(c) = cfg.data.crop_size {
            cfg.model.image_size = c;
        }
        cfg.validate().map_err(|e| Error::format(path, e))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        RunConfig::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let f = self.data.vlm_vocab_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Usage("data.vlm_vocab_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("configs serialize"));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.data
            .manifest
            .as_deref()
            .ok_or_else(|| Error::Usage("data.manifest is not set".into()))
    }
}
