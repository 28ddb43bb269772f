//! Run configuration: every tunable with its default, JSON (de)serialization
//! and dotted-key overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assigner::AssignerConfig;
use crate::data::{DatasetSpec, Manifest};
use crate::error::{Result, TaxError};
use crate::model::{UNetConfig, UncertaintyMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl StageConfig {
    fn with_lr(epochs: usize, learning_rate: f64) -> Self {
        StageConfig { epochs, batch_size: 8, learning_rate, momentum: 0.9 }
    }

    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TaxError::Config(format!("{stage}: epochs and batch_size must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(TaxError::Config(format!("{stage}: need learning_rate > 0 and momentum in [0, 1)")));
        }
        Ok(())
    }
}

/// Which annotator mask routes the final layer while training the TAX model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingSource {
    /// The assigner's hard annotator mask.
    Predicted,
    /// Full-resolution pseudo mask: the image's annotator on uncertain pixels,
    /// the shared index elsewhere.
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub base_width: usize,
    pub depth: usize,
    pub feature_width: usize,
    pub encoder_widths: Vec<usize>,
    pub prototype_dim: usize,
    pub prototypes_per_group: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { base_width: 8, depth: 3, feature_width: 8, encoder_widths: vec![16, 32, 64], prototype_dim: 64, prototypes_per_group: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub vanilla: StageConfig,
    pub assigner: StageConfig,
    pub tax: StageConfig,
    /// Fraction of pixels marked uncertain.
    pub uncertainty_fraction: f64,
    pub uncertainty_mode: UncertaintyMode,
    /// Softmax temperature of the assignment loss.
    pub temperature: f64,
    pub routing: RoutingSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            vanilla: StageConfig::with_lr(30, 0.02),
            assigner: StageConfig::with_lr(20, 0.01),
            tax: StageConfig::with_lr(30, 0.02),
            uncertainty_fraction: 0.15,
            uncertainty_mode: UncertaintyMode::Entropy,
            temperature: 0.1,
            routing: RoutingSource::Predicted,
        }
    }
}

/// Domain of the per-image majority vote over the hard annotator mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteMode {
    /// Only cells assigned to a specific annotator vote (fallback: all cells).
    Specific,
    /// Every cell votes, shared cells included.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub vote: VoteMode,
    pub batch_size: usize,
    /// Training patches stored per prototype in the trace-back index.
    pub top_m: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { vote: VoteMode::Specific, batch_size: 10, top_m: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetSpec,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { seed: 7, data: DatasetSpec::default(), model: ArchConfig::default(), train: TrainConfig::default(), eval: EvalConfig::default() }
    }
}

impl RunConfig {
    pub fn from_value(v: Value) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| TaxError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let v: Value = serde_json::from_str(text).map_err(|e| TaxError::Config(e.to_string()))?;
        Self::from_value(v)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.vanilla.validate("train.vanilla")?;
        self.train.assigner.validate("train.assigner")?;
        self.train.tax.validate("train.tax")?;
        if !(0.0..=1.0).contains(&self.train.uncertainty_fraction) {
            return Err(TaxError::Config(format!("train.uncertainty_fraction must lie in [0, 1], got {}", self.train.uncertainty_fraction)));
        }
        if !(self.train.temperature > 0.0 && self.train.temperature.is_finite()) {
            return Err(TaxError::Config("train.temperature must be positive".into()));
        }
        if self.eval.batch_size == 0 || self.eval.top_m == 0 {
            return Err(TaxError::Config("eval.batch_size and eval.top_m must be positive".into()));
        }
        Ok(())
    }

    /// The parts that determine training results; a resumed run must match.
    pub fn training_echo(&self) -> Value {
        serde_json::json!({ "seed": self.seed, "model": self.model, "train": self.train })
    }

    pub fn unet(&self, manifest: &Manifest) -> UNetConfig {
        UNetConfig {
            height: manifest.height,
            width: manifest.width,
            in_channels: 3,
            base_width: self.model.base_width,
            depth: self.model.depth,
            n_classes: manifest.n_classes,
            feature_width: self.model.feature_width,
        }
    }

    pub fn assigner(&self, manifest: &Manifest) -> AssignerConfig {
        AssignerConfig {
            height: manifest.height,
            width: manifest.width,
            in_channels: 3,
            widths: self.model.encoder_widths.clone(),
            dim: self.model.prototype_dim,
            per_group: self.model.prototypes_per_group,
            n_annotators: manifest.n_annotators,
        }
    }
}

/// Sets `key` (dotted path, e.g. `train.tax.epochs`) in a JSON config tree.
/// `raw` is parsed as JSON, falling back to a plain string.
pub fn set_key(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| TaxError::Config(format!("'{}' is not a section", parts[..i].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(TaxError::Config(format!("unknown config key '{key}'")));
        }
        node = obj.get_mut(*part).expect("checked");
    }
    if node.is_object() {
        return Err(TaxError::Config(format!("'{key}' is a section, not a value")));
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Merges `patch` into `base` recursively (objects merge, everything else replaces).
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Every leaf key of the default configuration with its default value.
pub fn describe_keys() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            leaf => out.push((prefix.to_string(), leaf.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", &RunConfig::default().to_value(), &mut out);
    out
}
