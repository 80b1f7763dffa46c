// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{invalid, Error, Result};
use crate::intervention::ReportFamily;
use crate::model::{FinetuneSettings, ModelConfig, OptimizerSettings};
use crate::stats::derive_seed;
use crate::world::WorldConfig;

pub const CONFIG_SCHEMA: &str = "structcorr.experiment/v1";

/// The system an experiment audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subject {
    Trained,
    WorldOracle,
    CooccurrenceOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub config: WorldConfig,
}

/// Model shape without the vocabulary size, which the corpus fixes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn resolve(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            context: self.context,
            vocab_size,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSpec {
    pub reward_epochs: usize,
    pub reward_lr: f64,
    pub settings: FinetuneSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisPlan {
    pub layers: Vec<usize>,
    pub families: Vec<ReportFamily>,
    pub strengths: Vec<f64>,
    pub n_perm: usize,
    pub bootstrap_resamples: usize,
    pub probe_lambda: f64,
    /// Ridge coefficient of the cross-fitted year ordering.
    pub ordering_lambda: f64,
    pub vector_layer: usize,
    pub perturb_magnitude: f64,
    pub seed: u64,
}

/// Everything one run needs. `finetune: null` stops after pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub subject: Subject,
    pub world: WorldSpec,
    pub corpus: CorpusConfig,
    pub model: ModelSpec,
    pub pretrain: OptimizerSettings,
    pub finetune: Option<FinetuneSpec>,
    pub analysis: AnalysisPlan,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(CONFIG_SCHEMA) => {}
            Some(other) => return Err(Error::Schema(format!("expected {CONFIG_SCHEMA}, found {other}"))),
            None => return Err(Error::Schema(format!("config has no schema field (expected {CONFIG_SCHEMA})"))),
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parsed config and the raw bytes it came from.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Schema(format!("config is not UTF-8: {e}")))?;
        Ok((Self::from_json(text)?, bytes))
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.analysis;
        if a.layers.is_empty() || a.families.is_empty() || a.strengths.is_empty() {
            return Err(invalid("analysis needs at least one layer, family and strength"));
        }
        if a.strengths.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(invalid("strengths must lie in [0, 1]"));
        }
        if a.n_perm < 100 {
            return Err(invalid("n_perm must be at least 100"));
        }
        if a.bootstrap_resamples == 0 {
            return Err(invalid("bootstrap_resamples must be positive"));
        }
        if !(a.probe_lambda >= 0.0 && a.ordering_lambda >= 0.0) {
            return Err(invalid("ridge coefficients must be non-negative"));
        }
        if !(a.perturb_magnitude >= 0.0 && a.perturb_magnitude.is_finite()) {
            return Err(invalid("perturb_magnitude must be finite and non-negative"));
        }
        if self.subject != Subject::Trained && self.finetune.is_some() {
            return Err(invalid("oracle subjects are not trained; set finetune to null"));
        }
        self.pretrain.validate()
    }

    /// Replace every seed with one derived from `seed`.
    pub fn with_seed_override(mut self, seed: u64) -> Self {
        let s = |i: u64| derive_seed(seed, &[i]);
        self.world.seed = s(0);
        self.corpus.seed = s(1);
        self.model.seed = s(2);
        self.pretrain.seed = s(3);
        if let Some(f) = &mut self.finetune {
            f.settings.seed = s(4);
            f.settings.optimizer.seed = s(5);
        }
        self.analysis.seed = s(6);
        self
    }

    /// Layers the subject actually has.
    pub fn n_layers(&self) -> usize {
        match self.subject {
            Subject::Trained => self.model.n_layers,
            _ => crate::oracle::ORACLE_LAYERS,
        }
    }
}
