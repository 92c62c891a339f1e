//! File-based run configuration. Every field has a default and unknown keys
//! are rejected; command-line flags are applied on top.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use cleftnet::data::SynthConfig;
use cleftnet::model::ModelConfig;
use cleftnet::train::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub import: ImportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
            import: ImportConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Tile overlap in voxels along `(d, h, w)`; overlapping predictions are averaged.
    pub overlap: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Extra thresholds, one report each.
    pub sweep: Vec<f64>,
    /// Voxel spacing `(dz, dy, dx)`; taken from the ground-truth file when absent.
    pub spacing: Option<[f64; 3]>,
    /// Number of evenly spaced z-slices exported as images.
    pub slices: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            sweep: Vec::new(),
            spacing: None,
            slices: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImportConfig {
    pub raw_path: String,
    pub cleft_path: String,
    /// Label value marking background; the CREMI convention (`2^64 − 1`) when absent.
    pub background_sentinel: Option<u64>,
    pub spacing: Option<[f64; 3]>,
}

impl Default for ImportConfig {
    fn default() -> Self {
        Self {
            raw_path: "volumes/raw".into(),
            cleft_path: "volumes/labels/clefts".into(),
            background_sentinel: None,
            spacing: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let e = &self.eval;
        if std::iter::once(&e.threshold).chain(&e.sweep).any(|t| !t.is_finite()) {
            return Err(CliError::Config("thresholds must be finite".into()));
        }
        Ok(())
    }

    /// Applies `--seed` to every seeded stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
    }
}
