//! Training manifest for an external LoRA fine-tuning run.
//!
//! Nothing here trains a model; the manifest records the dataset and the
//! adapter/optimizer settings a trainer should use.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::{bytes_digest, config_digest};
use crate::error::{Error, Result};

pub const TRAINING_MANIFEST_FORMAT: &str = "medbench-train/1";

/// Trainer settings. Every field has a default, so a config file or CLI only
/// needs to name the values it overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub adapter_rank: u32,
    pub learning_rate: f64,
    pub epochs: u32,
    pub micro_batch_size: u32,
    pub gradient_accumulation_steps: u32,
    pub eval_interval_steps: u32,
    pub freeze_vision_encoder: bool,
    pub optimizer: String,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            adapter_rank: 16,
            learning_rate: 2e-4,
            epochs: 5,
            micro_batch_size: 1,
            gradient_accumulation_steps: 4,
            eval_interval_steps: 200,
            freeze_vision_encoder: true,
            optimizer: "adamw".to_string(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn effective_batch_size(&self) -> u32 {
        self.micro_batch_size * self.gradient_accumulation_steps
    }

    pub fn check(&self) -> Result<()> {
        let positive = [
            ("adapter_rank", self.adapter_rank),
            ("epochs", self.epochs),
            ("micro_batch_size", self.micro_batch_size),
            (
                "gradient_accumulation_steps",
                self.gradient_accumulation_steps,
            ),
            ("eval_interval_steps", self.eval_interval_steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Manifest(format!("{name} must be positive")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Manifest(
                "learning_rate must be a positive number".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: String,
    pub rank: u32,
    /// Module selector understood by common LoRA trainers.
    pub target_modules: String,
    pub exclude_modules: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub micro_batch_size: u32,
    pub gradient_accumulation_steps: u32,
    pub effective_batch_size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub sha256: String,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub format: String,
    pub config_digest: String,
    pub seed: u64,
    pub dataset: DatasetRef,
    pub adapter: AdapterSpec,
    pub optimizer: String,
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch: BatchSpec,
    pub eval_interval_steps: u32,
    pub freeze_vision_encoder: bool,
}

impl TrainingManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Build the manifest for `dataset`, which must be an existing JSONL file.
pub fn training_manifest(cfg: &TrainingConfig, dataset: &Path) -> Result<TrainingManifest> {
    cfg.check()?;
    let bytes = std::fs::read(dataset).map_err(|e| {
        Error::Manifest(format!(
            "dataset '{}' is not readable: {e}",
            dataset.display()
        ))
    })?;
    let samples = bytes
        .split(|&b| b == b'\n')
        .filter(|l| !l.iter().all(u8::is_ascii_whitespace))
        .count();
    if samples == 0 {
        return Err(Error::Manifest(format!(
            "dataset '{}' is empty",
            dataset.display()
        )));
    }
    let sha256 = bytes_digest(&bytes);
    Ok(TrainingManifest {
        format: TRAINING_MANIFEST_FORMAT.to_string(),
        config_digest: config_digest(&(cfg, &sha256)),
        seed: cfg.seed,
        dataset: DatasetRef {
            path: dataset.to_path_buf(),
            sha256,
            samples,
        },
        adapter: AdapterSpec {
            kind: "lora".to_string(),
            rank: cfg.adapter_rank,
            target_modules: "all-linear".to_string(),
            exclude_modules: vec!["lm_head".to_string()],
        },
        optimizer: cfg.optimizer.clone(),
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch: BatchSpec {
            micro_batch_size: cfg.micro_batch_size,
            gradient_accumulation_steps: cfg.gradient_accumulation_steps,
            effective_batch_size: cfg.effective_batch_size(),
        },
        eval_interval_steps: cfg.eval_interval_steps,
        freeze_vision_encoder: cfg.freeze_vision_encoder,
    })
}
