//! The self-describing JSON run configuration.
//!
//! Science parameters live in the config file, not in flags; unknown
//! keys are rejected and every relative path resolves against the
//! config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use plm_core::data::SplitSpec;
use plm_core::optim::SgdConfig;
use plm_core::trainer::{CropConfig, TrainConfig, Variant};
use plm_core::{PlmError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Template-based synthetic generator; the test set derives from a
    /// fixed sibling stream of the root seed.
    Synthetic {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        height: usize,
        width: usize,
        noise_scale: f64,
    },
    /// IDX image/label file pairs (big-endian, magics 0x803/0x801).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        limit: usize,
        test_limit: usize,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct NoiseSpec {
    pub kind: NoiseKindSpec,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKindSpec {
    Symmetric,
    Pair,
    Idn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs_labeler: usize,
    pub epochs_joint: usize,
    pub epochs_classifier: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub optimizer: SgdConfig,
    /// Stage overrides; the shared optimizer applies when absent.
    #[serde(default)]
    pub joint_optimizer: Option<SgdConfig>,
    #[serde(default)]
    pub classifier_optimizer: Option<SgdConfig>,
    pub crop: CropConfig,
    #[serde(default = "default_anchor_count")]
    pub anchor_count: usize,
}

fn default_anchor_count() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct EvalSpec {
    /// "oracle" asserts recorded clean labels directly (synthetic data);
    /// "clean_model" trains an evaluation-only network on clean labels
    /// and filters by confidence.
    pub anchor_source: AnchorSource,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default = "default_cap")]
    pub per_class_cap: usize,
    #[serde(default = "default_clean_epochs")]
    pub clean_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    Oracle,
    CleanModel,
}

fn default_confidence() -> f64 {
    0.99
}

fn default_cap() -> usize {
    100
}

fn default_clean_epochs() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub noise: NoiseSpec,
    pub split: SplitSpecConfig,
    pub train: TrainSpec,
    pub eval: EvalSpec,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpecConfig {
    pub val_fraction: f64,
}

impl RunConfig {
    /// Parse a config file, reporting the JSON path of any offending field.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PlmError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            PlmError::Config(format!("{}: {} (at {})", path.display(), e.inner(), e.path()))
        })?;
        cfg.validate()?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((cfg, base))
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise.rate) {
            return Err(PlmError::Config(format!(
                "noise.rate {} must lie in [0, 1)",
                self.noise.rate
            )));
        }
        if !(0.0..1.0).contains(&self.split.val_fraction) || self.split.val_fraction == 0.0 {
            return Err(PlmError::Config(
                "split.val_fraction must lie in (0, 1)".into(),
            ));
        }
        self.train.optimizer.validate()?;
        if let Some(o) = &self.train.joint_optimizer {
            o.validate()?;
        }
        if let Some(o) = &self.train.classifier_optimizer {
            o.validate()?;
        }
        Ok(())
    }

    /// Resolve a configured path against the config file's directory.
    pub fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    pub fn train_config(&self, variant: Variant) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            variant,
            epochs_labeler: t.epochs_labeler,
            epochs_joint: t.epochs_joint,
            epochs_classifier: t.epochs_classifier,
            batch_size: t.batch_size,
            hidden: t.hidden.clone(),
            labeler_opt: t.optimizer.clone(),
            joint_opt: t.joint_optimizer.clone().unwrap_or_else(|| t.optimizer.clone()),
            classifier_opt: t
                .classifier_optimizer
                .clone()
                .unwrap_or_else(|| t.optimizer.clone()),
            crop: t.crop.clone(),
            anchor_count: t.anchor_count,
            seed: self.seed,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            val_fraction: self.split.val_fraction,
            seed: self.seed,
        }
    }
}
