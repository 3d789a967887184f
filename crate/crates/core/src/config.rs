//! Run configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agentic::{CostConfig, VerifyConfig};
use crate::backbone::BackboneConfig;
use crate::controller::{CalibrationConfig, ScoreConfig};
use crate::data::{DataConfig, SyntheticCorpusConfig};
use crate::metrics::EvalConfig;
use crate::objective::{BandConfig, RegulatorConfig};
use crate::retention::RetentionConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "EVE_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid [{section}]: {msg}")]
    Invalid { section: &'static str, msg: String },
    #[error("{SEED_ENV}={0:?} is not a comma-separated list of integers")]
    SeedEnv(String),
    #[error("bad sweep spec {0:?}: expected KEY=V1,V2,...")]
    Sweep(String),
}

fn invalid(section: &'static str, e: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        section,
        msg: e.to_string(),
    }
}

/// Where the token corpus comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Read this file instead of generating the synthetic corpus.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticCorpusConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    /// Import an exported matrix instead of drawing a seeded one.
    pub path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self { path: None, seed: 17 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seed: u64,
    pub batch_size: usize,
    pub ece_bins: usize,
    pub cvar_alpha: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            seed: 4242,
            batch_size: e.batch_size,
            ece_bins: e.ece_bins,
            cvar_alpha: e.cvar_alpha,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgenticSection {
    /// Cap on routed validation examples.
    pub max_examples: usize,
    /// Cap on calibration examples.
    pub max_calibration: usize,
    pub seed: u64,
}

impl Default for AgenticSection {
    fn default() -> Self {
        Self {
            max_examples: 200,
            max_calibration: 200,
            seed: 9001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Run the search as part of the full pipeline.
    pub enabled: bool,
    pub key: String,
    pub values: Vec<f64>,
    pub epochs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            enabled: true,
            key: "lambda_band_high".into(),
            values: vec![2.00, 2.05, 2.10],
            epochs: 1,
        }
    }
}

pub const SWEEP_KEYS: [&str; 5] = ["lambda_band_high", "lambda_band", "lambda_local", "lr_eve", "beta_init"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub corpus: CorpusSection,
    pub data: DataConfig,
    pub embedding: EmbeddingSection,
    pub backbone: BackboneConfig,
    pub band: BandConfig,
    pub regulator: RegulatorConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub retention: RetentionConfig,
    pub score: ScoreConfig,
    pub calibration: CalibrationConfig,
    pub costs: CostConfig,
    pub verify: VerifyConfig,
    pub agentic: AgenticSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![101, 202],
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusSection::default(),
            data: DataConfig::default(),
            embedding: EmbeddingSection::default(),
            backbone: BackboneConfig::default(),
            band: BandConfig::default(),
            regulator: RegulatorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            retention: RetentionConfig::default(),
            score: ScoreConfig::default(),
            calibration: CalibrationConfig::default(),
            costs: CostConfig::default(),
            verify: VerifyConfig::default(),
            agentic: AgenticSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Replaces the seed list with `EVE_SEED` when it is set.
    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(v) = value {
            let seeds = v
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| ConfigError::SeedEnv(v.to_owned()))?;
            if seeds.is_empty() {
                return Err(ConfigError::SeedEnv(v.to_owned()));
            }
            self.seeds = seeds;
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            mc_samples: self.backbone.mc_samples_eval,
            seed: self.eval.seed,
            batch_size: self.eval.batch_size,
            ece_bins: self.eval.ece_bins,
            cvar_alpha: self.eval.cvar_alpha,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(invalid("seeds", "duplicate seed"));
        }
        if self.corpus.path.is_none() {
            self.corpus.synthetic.validate().map_err(|e| invalid("corpus", e))?;
            if self.corpus.synthetic.vocab_size != self.backbone.vocab_size {
                return Err(invalid("backbone", "vocab_size differs from corpus.synthetic.vocab_size"));
            }
        }
        self.data.validate().map_err(|e| invalid("data", e))?;
        self.backbone.validate().map_err(|e| invalid("backbone", e))?;
        if self.backbone.context_len != self.data.context_len {
            return Err(invalid("backbone", "context_len differs from data.context_len"));
        }
        self.band.validate().map_err(|e| invalid("band", e))?;
        self.regulator.validate().map_err(|e| invalid("regulator", e))?;
        self.train.validate().map_err(|e| invalid("train", e))?;
        if self.eval.batch_size == 0 || self.eval.ece_bins == 0 || !(self.eval.cvar_alpha > 0.0 && self.eval.cvar_alpha < 1.0) {
            return Err(invalid("eval", "batch_size, ece_bins >= 1 and cvar_alpha in (0, 1) required"));
        }
        self.retention.validate().map_err(|e| invalid("retention", e))?;
        if self.retention.mu2_target != self.band.mu2_target {
            return Err(invalid("retention", "mu2_target differs from band.mu2_target"));
        }
        self.score.validate().map_err(|e| invalid("score", e))?;
        self.calibration.validate().map_err(|e| invalid("calibration", e))?;
        self.costs.validate().map_err(|e| invalid("costs", e))?;
        if !(0.0..=1.0).contains(&self.verify.min_coverage) || !(0.0..=1.0).contains(&self.verify.max_abstain) {
            return Err(invalid("verify", "bounds must lie in [0, 1]"));
        }
        if self.agentic.max_examples == 0 || self.agentic.max_calibration == 0 {
            return Err(invalid("agentic", "caps must be >= 1"));
        }
        if !SWEEP_KEYS.contains(&self.sweep.key.as_str()) {
            return Err(invalid("sweep", format!("unknown key {:?}; one of {SWEEP_KEYS:?}", self.sweep.key)));
        }
        if self.sweep.values.is_empty() || self.sweep.epochs == 0 {
            return Err(invalid("sweep", "values must be non-empty and epochs >= 1"));
        }
        Ok(())
    }

    /// Copy with one sweepable hyperparameter replaced.
    pub fn with_sweep_value(&self, key: &str, value: f64) -> Result<Self, ConfigError> {
        let mut c = self.clone();
        match key {
            "lambda_band_high" => c.band.lambda_band_high = value,
            "lambda_band" => c.band.lambda_band = value,
            "lambda_local" => c.band.lambda_local = value,
            "lr_eve" => c.train.lr_eve = value,
            "beta_init" => c.regulator.beta_init = value,
            _ => return Err(ConfigError::Sweep(key.to_owned())),
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses `KEY=V1,V2,...`.
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<f64>), ConfigError> {
    let (key, values) = spec.split_once('=').ok_or_else(|| ConfigError::Sweep(spec.to_owned()))?;
    let key = key.trim();
    if !SWEEP_KEYS.contains(&key) {
        return Err(ConfigError::Sweep(spec.to_owned()));
    }
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| ConfigError::Sweep(spec.to_owned()))?;
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(ConfigError::Sweep(spec.to_owned()));
    }
    Ok((key.to_owned(), values))
}
