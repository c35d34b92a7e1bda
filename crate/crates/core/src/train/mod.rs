//! Training harness: configuration presets, the learning-rate schedule, the
//! per-step optimization, checkpointing, the run loop, and the ablation
//! driver.

mod ablation;
mod checkpoint;
mod metrics_log;
mod runner;
mod step;

pub use ablation::{ablation_suite, format_ablation_table, AblationCell, AblationRow};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBody, CHECKPOINT_VERSION};
pub use metrics_log::{EpochRecord, MetricsLog, StepRecord};
pub use runner::{evaluate_model, run_training, RunOutcome, TrainData, Trainer};
pub use step::{train_step, StepOutcome};

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{CoreError, Result};
use crate::loss::{LossWeights, RelationDistance};
use crate::model::ModelConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Where training data comes from: annotation files plus an image directory,
/// or an in-memory synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Files {
        train_annotations: PathBuf,
        test_annotations: PathBuf,
        images_dir: PathBuf,
    },
    Synth { synth: SynthConfig },
}

/// OIM classifier hyperparameters. The lookup table is always sized from the
/// loaded identity universe, never from a config constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OimConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub queue_size: usize,
}

impl Default for OimConfig {
    fn default() -> Self {
        OimConfig { temperature: 1.0 / 30.0, momentum: 0.5, queue_size: 2000 }
    }
}

/// Search-protocol parameters used for the automatic final evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub gallery_size: usize,
    pub positives: usize,
    pub protocol_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { gallery_size: 50, positives: 10, protocol_seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub version: u32,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Epoch (0-based loop counter) from which the decayed rate applies.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; absent means no clipping.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_clip_norm: Option<f64>,
    pub lambda_prob: f64,
    pub lambda_rela: f64,
    pub relation_distance: RelationDistance,
    pub detach_teacher: bool,
    pub enable_prob_kd: bool,
    pub enable_rela_kd: bool,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub oim: OimConfig,
    pub eval: EvalConfig,
    pub model: ModelConfig,
}

/// Named default configurations; the first three mirror the published
/// per-dataset hyperparameters, `synthetic` is the desk-scale smoke setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetPreset {
    G2aps,
    Prw,
    CuhkSysu,
    Synthetic,
}

impl DatasetPreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "g2aps" => Ok(DatasetPreset::G2aps),
            "prw" => Ok(DatasetPreset::Prw),
            "cuhk-sysu" => Ok(DatasetPreset::CuhkSysu),
            "synthetic" => Ok(DatasetPreset::Synthetic),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown preset '{other}' (expected g2aps|prw|cuhk-sysu|synthetic)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            DatasetPreset::G2aps => "g2aps",
            DatasetPreset::Prw => "prw",
            DatasetPreset::CuhkSysu => "cuhk-sysu",
            DatasetPreset::Synthetic => "synthetic",
        }
    }
}

impl TrainConfig {
    pub fn preset(preset: DatasetPreset) -> TrainConfig {
        let common = TrainConfig {
            version: CONFIG_VERSION,
            batch_size: 2,
            initial_lr: 0.001,
            lr_decay_epoch: 16,
            lr_decay_factor: 0.1,
            total_epochs: 21,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip_norm: None,
            lambda_prob: 1.0,
            lambda_rela: 300.0,
            relation_distance: RelationDistance::Kl,
            detach_teacher: true,
            enable_prob_kd: true,
            enable_rela_kd: true,
            seed: 1,
            dataset: DatasetSpec::Files {
                train_annotations: PathBuf::from("data/g2aps/annotations_train.jsonl"),
                test_annotations: PathBuf::from("data/g2aps/annotations_test.jsonl"),
                images_dir: PathBuf::from("data/g2aps/images"),
            },
            oim: OimConfig { queue_size: 2000, ..OimConfig::default() },
            eval: EvalConfig::default(),
            model: ModelConfig::full(),
        };
        match preset {
            DatasetPreset::G2aps => common,
            DatasetPreset::Prw => TrainConfig {
                batch_size: 4,
                initial_lr: 0.0018,
                dataset: DatasetSpec::Files {
                    train_annotations: PathBuf::from("data/prw/annotations_train.jsonl"),
                    test_annotations: PathBuf::from("data/prw/annotations_test.jsonl"),
                    images_dir: PathBuf::from("data/prw/images"),
                },
                oim: OimConfig { queue_size: 5000, ..OimConfig::default() },
                ..common
            },
            DatasetPreset::CuhkSysu => TrainConfig {
                batch_size: 3,
                initial_lr: 0.0018,
                dataset: DatasetSpec::Files {
                    train_annotations: PathBuf::from("data/cuhk-sysu/annotations_train.jsonl"),
                    test_annotations: PathBuf::from("data/cuhk-sysu/annotations_test.jsonl"),
                    images_dir: PathBuf::from("data/cuhk-sysu/images"),
                },
                oim: OimConfig { queue_size: 500, ..OimConfig::default() },
                ..common
            },
            DatasetPreset::Synthetic => TrainConfig {
                batch_size: 2,
                initial_lr: 0.002,
                lr_decay_epoch: 32,
                total_epochs: 40,
                grad_clip_norm: Some(5.0),
                dataset: DatasetSpec::Synth {
                    synth: SynthConfig {
                        images_per_view: 32,
                        image_size: 80,
                        ground_person_width: 16,
                        ..SynthConfig::default()
                    },
                },
                oim: OimConfig { queue_size: 64, ..OimConfig::default() },
                model: ModelConfig {
                    // stride-4 tiny variant: small UAV persons need the
                    // finer feature grid
                    backbone: crate::model::BackboneSpec::Tiny {
                        channels: vec![16, 32, 32],
                        strides: vec![2, 2, 1],
                    },
                    anchor_sizes: vec![8.0, 12.0, 16.0, 24.0],
                    score_threshold: 0.3,
                    ..ModelConfig::tiny()
                },
                ..common
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CoreError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.total_epochs < 1 {
            return Err(CoreError::Config("total_epochs must be >= 1".into()));
        }
        if self.lr_decay_epoch >= self.total_epochs {
            return Err(CoreError::Config(format!(
                "lr_decay_epoch {} must be < total_epochs {}",
                self.lr_decay_epoch, self.total_epochs
            )));
        }
        if !(self.lr_decay_factor > 0.0) || !(self.initial_lr > 0.0) {
            return Err(CoreError::Config("learning-rate factors must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if let Some(clip) = self.grad_clip_norm {
            if !(clip > 0.0) {
                return Err(CoreError::Config("grad_clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_prob: if self.enable_prob_kd { self.lambda_prob } else { 0.0 },
            lambda_rela: if self.enable_rela_kd { self.lambda_rela } else { 0.0 },
            ..LossWeights::default()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| CoreError::Config(format!("config serialization: {e}")))
    }

    pub fn from_toml(s: &str) -> Result<TrainConfig> {
        let config: TrainConfig =
            toml::from_str(s).map_err(|e| CoreError::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }
}

/// Learning rate for a 0-based epoch index: the initial rate before the
/// decay epoch, multiplied by the decay factor from it onward.
pub fn lr_schedule(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.total_epochs {
        return Err(CoreError::InvalidArgument(format!(
            "epoch {epoch} out of range (total_epochs {})",
            config.total_epochs
        )));
    }
    Ok(if epoch >= config.lr_decay_epoch {
        config.initial_lr * config.lr_decay_factor
    } else {
        config.initial_lr
    })
}

/// Maps raw identity labels onto dense class indices [0, C).
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityIndex {
    ids: Vec<i64>,
    map: BTreeMap<i64, usize>,
}

impl IdentityIndex {
    pub fn from_ids(ids: impl IntoIterator<Item = i64>) -> Self {
        let mut ids: Vec<i64> = ids.into_iter().filter(|&i| i >= 0).collect();
        ids.sort_unstable();
        ids.dedup();
        let map = ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        IdentityIndex { ids, map }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn class_of(&self, identity: i64) -> Option<usize> {
        self.map.get(&identity).copied()
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }
}

/// Deterministic per-(seed, epoch, step) RNG stream.
pub(crate) fn derived_rng(seed: u64, epoch: u64, step: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut x = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(step.wrapping_mul(0x94D0_49BB_1331_11EB));
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    rand_chacha::ChaCha8Rng::seed_from_u64(x)
}

#[cfg(test)]
mod tests;
