//! Run configuration file.
//!
//! ```toml
//! profile = "desk"          # or "paper": base model dimensions
//! seeds = [0, 1, 2]
//! output = "runs"
//!
//! [data]
//! manifest = "data/manifest.jsonl"
//! window = 6                # T, chunks per sequence
//! stride = 1                # training windows
//! eval_stride = 1
//!
//! [model]                   # any ModelConfig field, overriding the profile
//! variant = "DF_XM_XS"
//!
//! [train]                   # any TrainConfig field
//! lr0 = 5e-4
//!
//! [synth]                   # any SyntheticSpec field
//! n_sessions = 40
//!
//! [ablate]
//! variants = ["TF_V", "DF_XM", "DF_XS", "DF_XM_XS"]
//! windows = [3, 6, 12]
//! layers = [1]
//! ```
//!
//! Every key is optional.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dyadformer::data::SyntheticSpec;
use dyadformer::model::{ModelConfig, ModelVariant};
use dyadformer::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// d_w = 32, 4 heads: trainable on a CPU.
    #[default]
    Desk,
    /// d_w = 768, 12 heads, 512/128/21 input widths.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => bail!("unknown profile {s:?} (expected desk or paper)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub window: usize,
    pub stride: usize,
    pub eval_stride: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: None,
            window: 6,
            stride: 1,
            eval_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<ModelVariant>,
    pub windows: Vec<usize>,
    /// Each value sets every encoder depth of the non-BERT variants.
    pub layers: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            variants: vec![ModelVariant::TfV, ModelVariant::DfXm, ModelVariant::DfXs, ModelVariant::DfXmXs],
            windows: vec![3, 6, 12],
            layers: vec![1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub data: DataSection,
    /// Overrides on top of the profile's [`ModelConfig`].
    pub model: toml::Table,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Desk,
            seeds: vec![0],
            output: PathBuf::from("runs"),
            data: DataSection::default(),
            model: toml::Table::new(),
            train: TrainConfig::default(),
            synth: SyntheticSpec::default(),
            ablate: AblateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.model_config()?;
        Ok(cfg)
    }

    /// Optional file, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn variant(&self) -> Result<ModelVariant> {
        match self.model.get("variant") {
            Some(v) => {
                let s = v.as_str().context("model.variant must be a string")?;
                Ok(s.parse()?)
            }
            None => Ok(ModelVariant::DfXmXs),
        }
    }

    pub fn set_model_value(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.model.insert(key.to_string(), value.into());
    }

    /// Profile defaults for the configured variant with `[model]` keys
    /// applied on top.
    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model_config_for(self.variant()?)
    }

    pub fn model_config_for(&self, variant: ModelVariant) -> Result<ModelConfig> {
        let base = match self.profile {
            Profile::Desk => ModelConfig::desk(variant),
            Profile::Paper => ModelConfig::paper(variant),
        };
        let mut table = toml::Table::try_from(&base)?;
        for (k, v) in &self.model {
            if !table.contains_key(k) {
                bail!("unknown model key {k:?}");
            }
            table.insert(k.clone(), v.clone());
        }
        table.insert("variant".into(), toml::Value::String(variant.key().into()));
        let cfg: ModelConfig = table.try_into()?;
        Ok(cfg)
    }
}
