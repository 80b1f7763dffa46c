// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{invalid, Error, Result};
use crate::stats::derive_seed;

use super::params::{ModelConfig, ModelParams};
use super::provenance::{Regime, StageRecord, TrainingProvenance};
use super::transformer::next_token_targets;

/// Examples per gradient chunk. Chunks are reduced in order, so the summed
/// gradient does not depend on how many threads computed them.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Seed of the data order.
    pub seed: u64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0, batch_size: 32, steps: 2000, seed: 0 }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(invalid("invalid Adam moment constants"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Clip `grad` to the configured global norm, then take one step.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64], s: &OptimizerSettings) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if s.clip_norm > 0.0 && norm > s.clip_norm {
            let f = s.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= f);
        }
        self.t += 1;
        let bc1 = 1.0 - s.beta1.powi(self.t as i32);
        let bc2 = 1.0 - s.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = s.beta1 * self.m[i] + (1.0 - s.beta1) * grad[i];
            self.v[i] = s.beta2 * self.v[i] + (1.0 - s.beta2) * grad[i] * grad[i];
            params[i] -= s.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + s.eps);
        }
    }
}

/// Token sequence with an optional target after each position.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub targets: Vec<Option<u32>>,
}

impl Example {
    pub fn next_token(tokens: &[u32]) -> Self {
        Self { tokens: tokens.to_vec(), targets: next_token_targets(tokens) }
    }

    /// Only the final position is supervised.
    pub fn completion(prompt: &[u32], answer: u32) -> Self {
        let mut targets = vec![None; prompt.len()];
        if let Some(last) = targets.last_mut() {
            *last = Some(answer);
        }
        Self { tokens: prompt.to_vec(), targets }
    }

    fn n_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Summed loss, number of targets and summed gradient over a batch.
pub fn batch_gradient(params: &ModelParams, batch: &[&Example]) -> Result<(f64, usize, Vec<f64>)> {
    let n = params.n_params();
    let parts = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; n];
            let mut loss = 0.0;
            for ex in chunk {
                loss += params.loss_and_grad(&ex.tokens, &ex.targets, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, batch.iter().map(|e| e.n_targets()).sum(), grad))
}

/// Mean per-target loss over examples, without gradients.
pub fn mean_loss(params: &ModelParams, examples: &[Example]) -> Result<f64> {
    let losses = examples
        .par_iter()
        .map(|e| params.loss(&e.tokens, &e.targets))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = examples.iter().map(Example::n_targets).sum();
    if n == 0 {
        return Err(invalid("no supervised positions"));
    }
    Ok(losses.iter().sum::<f64>() / n as f64)
}

/// Run `settings.steps` Adam updates over `examples`, reshuffled every pass.
/// Returns the per-step mean loss.
pub fn train_examples(
    params: &mut ModelParams,
    examples: &[Example],
    settings: &OptimizerSettings,
    adam: &mut Adam,
) -> Result<Vec<f64>> {
    settings.validate()?;
    if examples.is_empty() {
        return Err(invalid("no training examples"));
    }
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut curve = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let mut batch = Vec::with_capacity(settings.batch_size);
        while batch.len() < settings.batch_size {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, &[epoch])));
                epoch += 1;
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let (loss, n, mut grad) = batch_gradient(params, &batch)?;
        if n == 0 {
            return Err(invalid("batch has no supervised positions"));
        }
        let mean = loss / n as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence(format!("loss became {mean} at step {step}")));
        }
        grad.iter_mut().for_each(|g| *g /= n as f64);
        adam.step(&mut params.data, &mut grad, settings);
        if !params.all_finite() {
            return Err(Error::Divergence(format!("non-finite parameter after step {step}")));
        }
        if step % 100 == 0 {
            log::info!("step {step}: loss {mean:.4}");
        }
        curve.push(mean);
    }
    Ok(curve)
}

/// Next-token pre-training on the corpus' training split.
pub fn pretrain(
    config: &ModelConfig,
    corpus: &Corpus,
    settings: &OptimizerSettings,
) -> Result<(ModelParams, TrainingProvenance)> {
    if config.vocab_size != corpus.vocab.len() {
        return Err(Error::ShapeMismatch(format!(
            "model vocabulary {} but corpus vocabulary {}",
            config.vocab_size,
            corpus.vocab.len()
        )));
    }
    if let Some(longest) = corpus.sequences.iter().map(Vec::len).max() {
        if longest > config.context {
            return Err(invalid(format!("context {} shorter than longest sequence {longest}", config.context)));
        }
    }
    let train: Vec<Example> = corpus.train_sequences().map(Example::next_token).collect();
    let held: Vec<Example> = corpus.heldout_sequences().map(Example::next_token).collect();
    let mut params = ModelParams::init(config)?;
    let mut adam = Adam::new(params.n_params());
    let curve = train_examples(&mut params, &train, settings, &mut adam)?;
    let heldout_loss = if held.is_empty() { None } else { Some(mean_loss(&params, &held)?) };
    let record = StageRecord {
        regime: Regime::Pretrained,
        data_fingerprint: corpus.fingerprint(),
        optimizer: settings.clone(),
        seeds: BTreeMap::from([
            ("model_init".to_string(), config.seed),
            ("data_order".to_string(), settings.seed),
            ("corpus".to_string(), corpus.config.seed),
        ]),
        loss_curve: curve,
        heldout_loss,
        warnings: Vec::new(),
    };
    Ok((params, TrainingProvenance::pretrained(record)?))
}
