//! Sectioned experiment configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::attacks::FrMode;
use crate::imagedata::{DatasetId, Split};
use crate::models::{Arch, Encryption, VggConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub id: String,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            id: "djescc".into(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: DatasetId,
    pub train_split: Split,
    pub test_split: Split,
    /// Keep only the first `n` images of a split; 0 keeps all.
    pub train_limit: usize,
    pub test_limit: usize,
    /// Side length of generated images when `dataset = "synthetic"`.
    pub synthetic_side: usize,
    pub synthetic_train_count: usize,
    pub synthetic_test_count: usize,
    pub synthetic_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Cifar10,
            train_split: Split::Train,
            test_split: Split::Test,
            train_limit: 0,
            test_limit: 0,
            synthetic_side: 32,
            synthetic_train_count: 50_000,
            synthetic_test_count: 10_000,
            synthetic_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncryptionKind {
    Learned,
    Shuffle,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub t: usize,
    pub jscc_widths: [usize; 4],
    pub unet_width: usize,
    pub encryption: EncryptionKind,
    pub shuffle_seed: u64,
    pub lambda_e: f64,
    pub lambda_d: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Arch::default();
        Self {
            t: a.t,
            jscc_widths: a.jscc_widths,
            unet_width: a.unet_width,
            encryption: EncryptionKind::Learned,
            shuffle_seed: 0,
            lambda_e: 0.05,
            lambda_d: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    /// Extractor file; empty means `<cache>/features/<derived name>`.
    pub checkpoint: String,
    pub width_divisor: usize,
    pub cut_block: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f64,
    pub pretrain_limit: usize,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            checkpoint: String::new(),
            width_divisor: 1,
            cut_block: 3,
            pretrain_epochs: 30,
            pretrain_batch_size: 64,
            pretrain_lr: 1e-3,
            pretrain_limit: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Draw one SNR per image instead of one per batch.
    pub per_image_snr: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub plateau_threshold: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            snr_min_db: 0.0,
            snr_max_db: 20.0,
            per_image_snr: false,
            epochs: 500,
            batch_size: 64,
            initial_lr: 1e-3,
            plateau_patience: 10,
            plateau_factor: 0.1,
            plateau_threshold: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub snrs_db: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    /// Images per exported sample grid.
    pub grid_images: usize,
    /// Also evaluate with the noise disabled.
    pub noiseless: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            snrs_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            repeats: 10,
            seed: 1,
            grid_images: 8,
            noiseless: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub dataset: DatasetId,
    pub split: Split,
    pub limit: usize,
    /// Held-out images the attack is scored on.
    pub eval_count: usize,
    pub snr_db: f64,
    pub fr_mode: FrMode,
    pub gan_epochs: usize,
    pub gan_batch_size: usize,
    pub gan_lr: f64,
    pub generator_width: usize,
    pub collapse_threshold: f64,
    pub collapse_epochs: usize,
    pub seed: u64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Stl10,
            split: Split::Unlabeled,
            limit: 0,
            eval_count: 100,
            snr_db: 10.0,
            fr_mode: FrMode::MostSignificantBit,
            gan_epochs: 600,
            gan_batch_size: 64,
            gan_lr: 1e-4,
            generator_width: 32,
            collapse_threshold: 1e-6,
            collapse_epochs: 20,
            seed: 2,
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub features: FeatureSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
    pub attack: AttackSection,
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text: every key, fixed order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// sha256 of the canonical text.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Apply `section.key=value` overrides. The key must already exist;
    /// values are parsed as TOML, falling back to a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, TrainError> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("canonical text parses");
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| bad(format!("override `{o}` is not of the form section.key=value")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| bad(format!("override key `{key}` needs a section")))?;
            let table = doc
                .get_mut(section)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| bad(format!("unknown config section `{section}`")))?;
            let slot = table
                .get_mut(field)
                .ok_or_else(|| bad(format!("unknown config key `{section}.{field}`")))?;
            let raw = raw.trim();
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            *slot = match (&*slot, value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
        }
        let text = toml::to_string(&doc).expect("table serializes");
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let t = &self.training;
        if t.epochs < 1 {
            return Err(bad("training.epochs must be at least 1"));
        }
        if t.batch_size < 1 {
            return Err(bad("training.batch_size must be at least 1"));
        }
        if !(t.plateau_factor > 0.0 && t.plateau_factor < 1.0) {
            return Err(bad("training.plateau_factor must lie in (0, 1)"));
        }
        if !(t.snr_min_db <= t.snr_max_db) {
            return Err(bad("training.snr_min_db exceeds training.snr_max_db"));
        }
        if !(t.initial_lr > 0.0) {
            return Err(bad("training.initial_lr must be positive"));
        }
        if self.evaluation.repeats < 1 {
            return Err(bad("evaluation.repeats must be at least 1"));
        }
        let m = &self.model;
        if !(m.lambda_e >= 0.0 && m.lambda_d >= 0.0) {
            return Err(bad("model.lambda_e and model.lambda_d must be non-negative"));
        }
        if m.t < 1 || m.unet_width < 1 || m.jscc_widths.contains(&0) {
            return Err(bad("model widths must be positive"));
        }
        if self.data.synthetic_side % 4 != 0 || self.data.synthetic_side == 0 {
            return Err(bad("data.synthetic_side must be a positive multiple of 4"));
        }
        let f = &self.features;
        if !(1..=5).contains(&f.cut_block) || f.width_divisor < 1 {
            return Err(bad("features.cut_block must be 1..=5 and width_divisor positive"));
        }
        let a = &self.attack;
        if a.gan_batch_size < 1 || a.generator_width < 1 {
            return Err(bad("attack batch size and generator width must be positive"));
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        Arch {
            channels: 3,
            t: self.model.t,
            jscc_widths: self.model.jscc_widths,
            unet_width: self.model.unet_width,
        }
    }

    pub fn encryption(&self) -> Encryption {
        match self.model.encryption {
            EncryptionKind::Learned => Encryption::Learned,
            EncryptionKind::Shuffle => Encryption::Shuffle {
                seed: self.model.shuffle_seed,
            },
            EncryptionKind::None => Encryption::None,
        }
    }

    pub fn vgg(&self) -> VggConfig {
        VggConfig {
            width_divisor: self.features.width_divisor,
            cut_block: self.features.cut_block,
            ..VggConfig::default()
        }
    }
}
