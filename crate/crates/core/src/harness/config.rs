use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::numerics::AdamWConfig;

/// How pre-training chooses masked tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingStrategy {
    MotionAware,
    Random,
}

impl MaskingStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskingStrategy::MotionAware => "motion_aware",
            MaskingStrategy::Random => "random",
        }
    }
}

/// Missing `arch` keys fall back to the desk preset rather than the
/// full-size defaults.
fn arch_over_desk<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ArchConfig, D::Error> {
    use serde::de::Error as _;
    let patch = serde_yaml::Value::deserialize(d)?;
    let mut base = serde_yaml::to_value(ArchConfig::desk()).map_err(D::Error::custom)?;
    match (patch, &mut base) {
        (serde_yaml::Value::Null, _) => {}
        (serde_yaml::Value::Mapping(p), serde_yaml::Value::Mapping(b)) => {
            for (k, v) in p {
                if !b.contains_key(&k) {
                    return Err(D::Error::custom(format!("unknown arch field {k:?}")));
                }
                b.insert(k, v);
            }
        }
        _ => return Err(D::Error::custom("arch must be a mapping")),
    }
    serde_yaml::from_value(base).map_err(D::Error::custom)
}

/// Pre-training run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(deserialize_with = "arch_over_desk")]
    pub arch: ArchConfig,
    /// Corpus directory or manifest; the CLI may supply it instead.
    pub corpus: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub optimizer: AdamWConfig,
    pub masking: MaskingStrategy,
    /// Softmax temperature of the motion-aware masking distribution.
    pub temperature: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::desk(),
            corpus: None,
            epochs: 100,
            batch_size: 32,
            warmup_epochs: 20,
            peak_lr: 1e-3,
            floor_lr: 5e-4,
            optimizer: AdamWConfig::default(),
            masking: MaskingStrategy::MotionAware,
            temperature: 1.0,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(0.0 <= self.floor_lr && self.floor_lr <= self.peak_lr) {
            return Err(Error::Config(format!(
                "need 0 <= floor_lr ({}) <= peak_lr ({})",
                self.floor_lr, self.peak_lr
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Sequence-level feature pooling for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
}

/// Frozen-feature linear classifier training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_fraction: f64,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            label_fraction: 1.0,
            pooling: Pooling::Mean,
            seed: 0,
        }
    }
}

/// End-to-end fine-tuning with an MLP head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub optimizer: AdamWConfig,
    /// Per-layer learning-rate decay factor.
    pub layer_decay: f64,
    pub label_fraction: f64,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 48,
            warmup_epochs: 5,
            peak_lr: 3e-4,
            floor_lr: 1e-5,
            optimizer: AdamWConfig {
                beta2: 0.999,
                ..AdamWConfig::default()
            },
            layer_decay: 0.65,
            label_fraction: 1.0,
            pooling: Pooling::Mean,
            seed: 0,
        }
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::Config(format!("label_fraction {f} outside (0, 1]")));
    }
    Ok(())
}

impl LinearProbeConfig {
    pub fn validate(&self) -> Result<()> {
        check_fraction(self.label_fraction)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr must be >= 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        check_fraction(self.label_fraction)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config("warmup_epochs must be below epochs".into()));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::Config(format!("layer_decay {} outside (0, 1]", self.layer_decay)));
        }
        Ok(())
    }
}

/// Evaluation protocol selected by `mode`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvalConfig {
    Linear(LinearProbeConfig),
    Finetune(FinetuneConfig),
}

/// Reads a YAML config file; unknown keys and type errors are config errors
/// naming the file and line.
pub fn load_yaml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_yaml(&text, path)
}

pub fn parse_yaml<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_yaml::from_str(text).map_err(|e| {
        let line = e.location().map_or(0, |l| l.line());
        Error::Config(format!("{}:{line}: {e}", path.display()))
    })
}

/// First 16 hex digits of the SHA-256 of the value's YAML form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_yaml::to_string(value).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
