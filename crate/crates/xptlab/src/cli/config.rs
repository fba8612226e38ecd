//! Experiment configuration: one JSON file drives generation, pretraining,
//! tuning, and analysis, and its hash ties artifacts together.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::projection::TsneConfig;
use crate::prompts::PromptConfig;
use crate::synthlang::{check_vocab, SynthConfig};
use crate::tuning::{Hyper, PretrainConfig, TuneMode, DEFAULT_LR_GRID};

/// Analysis-stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub tsne: TsneConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { tsne: TsneConfig::default() }
    }
}

/// Tuning defaults shared by both methods; the mode comes from the command
/// line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneDefaults {
    /// 0.0 selects a rate from `lr_grid` with short probes.
    pub lr: f64,
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TuneDefaults {
    fn default() -> Self {
        Self {
            lr: 0.0,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            batch_size: 32,
            epochs: 30,
        }
    }
}

impl TuneDefaults {
    pub fn for_mode(&self, mode: TuneMode) -> Hyper {
        Hyper {
            mode,
            lr: self.lr,
            lr_grid: self.lr_grid.clone(),
            batch_size: self.batch_size,
            epochs: self.epochs,
        }
    }
}

/// Everything one experiment needs. Any field may be omitted from the JSON
/// file; unknown fields are rejected to catch typos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "ModelConfig::desk_default")]
    pub model: ModelConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub tune: TuneDefaults,
    #[serde(default)]
    pub data: SynthConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    /// Run seeds used by multi-seed sweeps.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk_default(),
            prompt: PromptConfig::default(),
            pretrain: PretrainConfig::default(),
            tune: TuneDefaults::default(),
            data: SynthConfig::default(),
            analysis: AnalysisConfig::default(),
            seeds: default_seeds(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Input(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        check_vocab(&self.model)?;
        self.data.validate()?;
        self.pretrain.validate()?;
        if self.prompt.length == 0 || self.prompt.length > self.model.max_seq {
            return Err(Error::Input(format!(
                "prompt length {} must be in 1..={}",
                self.prompt.length, self.model.max_seq
            )));
        }
        if self.tune.batch_size == 0 || self.tune.epochs == 0 {
            return Err(Error::Input("tune batch_size and epochs must be positive".into()));
        }
        if self.tune.lr < 0.0 || !self.tune.lr.is_finite() {
            return Err(Error::Input(format!("tune lr {} is not usable", self.tune.lr)));
        }
        if self.tune.lr == 0.0 && self.tune.lr_grid.is_empty() {
            return Err(Error::Input("tune lr 0 requires a non-empty lr_grid".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Input("seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Short hex digest of the canonical JSON form; written into dataset
    /// manifests and report headers so mixed artifacts are caught.
    pub fn config_hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        let mut h = Sha256::new();
        h.update(&bytes);
        let full = crate::encoder::hex(&h.finalize());
        Ok(full[..16].to_string())
    }
}
