// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::stats::derive_seed;

use super::hooks::Hooks;
use super::params::ModelParams;
use super::provenance::{Regime, StageRecord, TrainingProvenance};
use super::reward::RewardModel;
use super::train::{train_examples, Adam, Example, OptimizerSettings};

pub const FLAT_REWARD_WARNING: &str = "reward signal flat";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub rounds: usize,
    /// Samples per prompt per round.
    pub k: usize,
    pub temperature: f64,
    /// Adam updates per round over the kept completions.
    pub optimizer: OptimizerSettings,
    pub seed: u64,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self {
            rounds: 4,
            k: 8,
            temperature: 1.0,
            optimizer: OptimizerSettings { lr: 1e-3, steps: 40, batch_size: 20, ..OptimizerSettings::default() },
            seed: 0,
        }
    }
}

/// Draw an index from a probability vector with one uniform variate.
pub(crate) fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn tempered(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Rejection-sampling fine-tuning: each round samples `k` single-token
/// completions per prompt, keeps the highest-reward one (first on ties) and
/// takes supervised steps toward the kept completions.
pub fn finetune(
    params: &ModelParams,
    provenance: &TrainingProvenance,
    reward: &RewardModel,
    prompts: &[Vec<u32>],
    settings: &FinetuneSettings,
) -> Result<(ModelParams, TrainingProvenance)> {
    if provenance.regime() != Regime::Pretrained {
        return Err(invalid("fine-tuning requires a pretrained model"));
    }
    if settings.rounds == 0 {
        return Err(invalid("fine-tuning needs at least one round"));
    }
    if settings.k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if settings.temperature.is_nan() || settings.temperature <= 0.0 {
        return Err(invalid("temperature must be positive"));
    }
    if prompts.is_empty() {
        return Err(invalid("no fine-tuning prompts"));
    }
    if reward.vocab_size != params.config.vocab_size {
        return Err(invalid("reward model and policy vocabularies differ"));
    }
    let mut p = params.clone();
    let mut adam = Adam::new(p.n_params());
    let mut curve = Vec::new();
    let mut warnings = Vec::new();
    let flat = prompts.iter().all(|prompt| {
        let first = reward.score(prompt, &[0]);
        (1..reward.vocab_size as u32).all(|t| reward.score(prompt, &[t]) == first)
    });
    if flat {
        log::warn!("{FLAT_REWARD_WARNING}");
        warnings.push(FLAT_REWARD_WARNING.to_string());
    }
    for round in 0..settings.rounds {
        let picks = prompts
            .par_iter()
            .enumerate()
            .map(|(i, prompt)| {
                let out = p.forward(prompt, &Hooks::new())?;
                let probs = tempered(&out.logits, settings.temperature);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, &[round as u64, i as u64]));
                let samples: Vec<u32> = (0..settings.k).map(|_| sample_index(&probs, &mut rng) as u32).collect();
                let scores: Vec<f64> = samples.iter().map(|&s| reward.score(prompt, &[s])).collect();
                let mut best = 0;
                for (j, &s) in scores.iter().enumerate() {
                    if s > scores[best] {
                        best = j;
                    }
                }
                Ok(samples[best])
            })
            .collect::<Result<Vec<_>>>()?;
        let examples: Vec<Example> =
            prompts.iter().zip(&picks).map(|(prompt, &tok)| Example::completion(prompt, tok)).collect();
        let opt = OptimizerSettings { seed: derive_seed(settings.optimizer.seed, &[round as u64]), ..settings.optimizer.clone() };
        curve.extend(train_examples(&mut p, &examples, &opt, &mut adam)?);
    }

    let mut h = Sha256::new();
    for prompt in prompts {
        h.update((prompt.len() as u32).to_le_bytes());
        for t in prompt {
            h.update(t.to_le_bytes());
        }
    }
    for w in reward.weights.iter().chain(&reward.bias) {
        h.update(w.to_le_bytes());
    }
    let record = StageRecord {
        regime: Regime::Finetuned,
        data_fingerprint: hex::encode(h.finalize()),
        optimizer: settings.optimizer.clone(),
        seeds: BTreeMap::from([("sampling".to_string(), settings.seed), ("data_order".to_string(), settings.optimizer.seed)]),
        loss_curve: curve,
        heldout_loss: None,
        warnings,
    };
    let prov = provenance.with_finetune(record)?;
    Ok((p, prov))
}
