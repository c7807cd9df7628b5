//! Run configuration: a preset or TOML file, then `section.key=value`
//! overrides, validated as a whole before any work starts.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use nphd_core::corpus::{validate_ratios, CleanConfig, DEFAULT_PUNCTUATION, DEFAULT_RATIOS};
use nphd_core::lora::{BiasMode, LoraConfig, Projection};
use nphd_core::model::ModelConfig;
use nphd_core::quant::{QuantScheme, DEFAULT_BLOCK_SIZE};
use nphd_core::tokenizer::{DEFAULT_TASK_PREFIX, MAX_SOURCE_LEN, MAX_TARGET_LEN};
use nphd_core::trainer::TrainConfig;

pub const PRESETS: [&str; 1] = ["toy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub punctuation: String,
    pub strict: bool,
    pub ratios: [f64; 3],
    pub split_seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            punctuation: DEFAULT_PUNCTUATION.to_string(),
            strict: false,
            ratios: DEFAULT_RATIOS,
            split_seed: 0,
        }
    }
}

impl CorpusSection {
    pub fn clean_config(&self) -> CleanConfig {
        CleanConfig {
            punctuation: self.punctuation.clone(),
            strict: self.strict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    pub task_prefix: String,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            task_prefix: DEFAULT_TASK_PREFIX.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            max_source_len: MAX_SOURCE_LEN,
            max_target_len: MAX_TARGET_LEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    /// Absent means a dense base.
    pub scheme: Option<QuantScheme>,
    pub block_size: usize,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            scheme: None,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub bias_mode: BiasMode,
    pub target_projections: Vec<Projection>,
    /// Seed for the adapter `A` initialization.
    pub seed: u64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let l = LoraConfig::default();
        Self {
            r: l.r,
            alpha: l.alpha,
            dropout: l.dropout,
            bias_mode: l.bias_mode,
            target_projections: l.target_projections,
            seed: 0,
        }
    }
}

impl AdapterSection {
    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            r: self.r,
            alpha: self.alpha,
            dropout: self.dropout,
            bias_mode: self.bias_mode,
            target_projections: self.target_projections.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub tokenizer: TokenizerSection,
    pub data: DataSection,
    pub model: ModelConfig,
    pub lora: AdapterSection,
    pub quant: QuantSection,
    pub trainer: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::default()),
            _ => None,
        }
    }

    /// Loads `source` (a preset name or a TOML path), applies overrides and
    /// validates the result.
    pub fn load(source: &str, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::default()).expect("default config serializes");
        if Self::preset(source).is_none() {
            let text = std::fs::read_to_string(Path::new(source))
                .with_context(|| format!("config {source} is neither a preset ({}) nor a readable file", PRESETS.join(", ")))?;
            let file: toml::Value = text.parse().with_context(|| format!("parsing {source}"))?;
            merge(&mut value, file);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = value.try_into().map_err(|e| anyhow!("invalid config: {e}"))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.clean_config().validate()?;
        validate_ratios(self.corpus.ratios)?;
        self.model.validate()?;
        self.lora.lora_config().validate()?;
        self.trainer.validate()?;
        let d = &self.data;
        if d.max_source_len == 0 || d.max_source_len > MAX_SOURCE_LEN {
            bail!("data.max_source_len must be in 1..={MAX_SOURCE_LEN}");
        }
        if d.max_target_len == 0 || d.max_target_len > MAX_TARGET_LEN {
            bail!("data.max_target_len must be in 1..={MAX_TARGET_LEN}");
        }
        if self.tokenizer.vocab_size < 5 {
            bail!("tokenizer.vocab_size is too small");
        }
        if self.quant.scheme.is_some() && self.quant.block_size == 0 {
            bail!("quant.block_size must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `trainer.learning_rate=0.01`. The value is read as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(value: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} must look like section.key=value"))?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = value;
    let keys: Vec<&str> = path.trim().split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {spec:?}: {} is not a section", keys[..i].join(".")))?;
        if i + 1 == keys.len() {
            table.insert(key.to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    bail!("override {spec:?} has an empty key")
}
