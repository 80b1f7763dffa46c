// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::train::OptimizerSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Pretrained,
    Finetuned,
}

/// One training stage as it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub regime: Regime,
    /// SHA-256 of the stage's training data.
    pub data_fingerprint: String,
    pub optimizer: OptimizerSettings,
    pub seeds: BTreeMap<String, u64>,
    pub loss_curve: Vec<f64>,
    pub heldout_loss: Option<f64>,
    pub warnings: Vec<String>,
}

/// Stabilization history of a model. Stages can only be appended through
/// the pretrained -> finetuned transition, and never edited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProvenance", into = "RawProvenance")]
pub struct TrainingProvenance {
    stages: Vec<StageRecord>,
}

#[derive(Serialize, Deserialize)]
struct RawProvenance {
    regime: Regime,
    stages: Vec<StageRecord>,
}

impl TryFrom<RawProvenance> for TrainingProvenance {
    type Error = crate::error::Error;

    fn try_from(raw: RawProvenance) -> Result<Self> {
        let mut stages = raw.stages.into_iter();
        let first = stages.next().ok_or_else(|| invalid("provenance has no stages"))?;
        let mut p = Self::pretrained(first)?;
        for s in stages {
            p = p.with_finetune(s)?;
        }
        if p.regime() != raw.regime {
            return Err(invalid("declared regime disagrees with stage history"));
        }
        Ok(p)
    }
}

impl From<TrainingProvenance> for RawProvenance {
    fn from(p: TrainingProvenance) -> Self {
        Self { regime: p.regime(), stages: p.stages }
    }
}

impl TrainingProvenance {
    pub fn pretrained(record: StageRecord) -> Result<Self> {
        if record.regime != Regime::Pretrained {
            return Err(invalid("the first stage must be pre-training"));
        }
        Ok(Self { stages: vec![record] })
    }

    /// New provenance with a fine-tuning stage appended.
    pub fn with_finetune(&self, record: StageRecord) -> Result<Self> {
        if self.regime() != Regime::Pretrained {
            return Err(invalid("only a pretrained model can be fine-tuned"));
        }
        if record.regime != Regime::Finetuned {
            return Err(invalid("the appended stage must be fine-tuning"));
        }
        let mut stages = self.stages.clone();
        stages.push(record);
        Ok(Self { stages })
    }

    pub fn regime(&self) -> Regime {
        self.stages.last().map_or(Regime::Pretrained, |s| s.regime)
    }

    pub fn stages(&self) -> &[StageRecord] {
        &self.stages
    }

    /// Human-readable task statement implied by the regime.
    pub fn task_description(&self) -> &'static str {
        match self.regime() {
            Regime::Pretrained => "predict the corpus-probable next token",
            Regime::Finetuned => "answer queries with world-true tokens, as selected by a ground-truth reward",
        }
    }
}
