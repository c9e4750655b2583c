//! Experiment configuration: TOML file, dotted-key overrides, validation and
//! content hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{InputFormat, SplitMode};
use crate::eval::stability::StabilityConfig;
use crate::eval::EvalConfig;
use crate::model::{AblationFlags, ModelConfig};
use crate::synth::SyntheticSpec;
use crate::training::{LossWeights, TrainConfig};

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad config: {0}")]
    Parse(String),
    #[error("invalid override {0:?} (expected key.path=value)")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub domain_z: Option<PathBuf>,
    pub domain_zbar: Option<PathBuf>,
    pub format: InputFormat,
    /// Exposed overlap ratio over the full user-key intersection.
    pub k_u: f64,
    /// Interaction subsampling factor.
    pub d_s: f64,
    /// Ingest filter: drop users with fewer interactions.
    pub min_interactions: usize,
    pub split_mode: SplitMode,
    /// Hold out a validation item per user as well.
    pub validation: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            domain_z: None,
            domain_zbar: None,
            format: InputFormat::TsvRatings,
            k_u: 1.0,
            d_s: 1.0,
            min_interactions: 5,
            split_mode: SplitMode::Auto,
            validation: false,
        }
    }
}

/// The whole experiment: data preparation, model, training, losses, ablation,
/// evaluation, plus the synthetic-generator and stability-diagnostic
/// sections used by their subcommands. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub ablation: AblationFlags,
    pub eval: EvalConfig,
    pub synth: SyntheticSpec,
    pub stability: StabilityConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    /// Load (or default) and apply `--set key.path=value` overrides in order.
    pub fn load_with_overrides(
        path: Option<&Path>,
        overrides: &[String],
    ) -> Result<Self, ConfigError> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?;
                text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    /// Cross-section sanity checks beyond serde's shape validation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.data.k_u) {
            return Err(ConfigError::Invalid(format!("data.k_u {} outside [0, 1]", self.data.k_u)));
        }
        if !(self.data.d_s > 0.0 && self.data.d_s <= 1.0) {
            return Err(ConfigError::Invalid(format!("data.d_s {} outside (0, 1]", self.data.d_s)));
        }
        if self.train.batch_size == 0 {
            return Err(ConfigError::Invalid("train.batch_size must be positive".into()));
        }
        if self.eval.negatives == 0 || self.eval.k == 0 {
            return Err(ConfigError::Invalid("eval.negatives and eval.k must be positive".into()));
        }
        Ok(())
    }

    /// Content hash of the effective configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&bytes)
    }

    /// Clone with one dotted override applied (used by sweeps).
    pub fn with_override(&self, spec: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::Value::try_from(self)
            .map_err(|e| ConfigError::Parse(e.to_string()))?
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        apply_override(&mut table, spec)?;
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Apply one `a.b.c=value` override; the value is parsed as a TOML literal,
/// falling back to a string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(ConfigError::BadOverride(spec.into()));
    }
    let value = parse_toml_value(raw);
    let mut current = table;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(format!("{key}: {part} is not a table")))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v exists"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
