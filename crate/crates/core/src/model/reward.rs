// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::corpus::{col_token, era_token, row_token, AnswerSlot, PromptSet, Vocab};
use crate::error::{invalid, Error, Result};
use crate::world::{EntityKind, WorldStructure};

use super::train::{Adam, OptimizerSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preferred {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<u32>,
    pub a: Vec<u32>,
    pub b: Vec<u32>,
    pub preferred: Preferred,
}

impl PreferencePair {
    fn winner_loser(&self) -> (&[u32], &[u32]) {
        match self.preferred {
            Preferred::A => (&self.a, &self.b),
            Preferred::B => (&self.b, &self.a),
        }
    }
}

/// Bilinear scorer: `score = Σ_{t ∈ prompt, r ∈ response} W[t][r] + Σ_r b[r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub vocab_size: usize,
    /// Row-major `vocab × vocab`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl RewardModel {
    pub fn zeros(vocab_size: usize) -> Self {
        Self { vocab_size, weights: vec![0.0; vocab_size * vocab_size], bias: vec![0.0; vocab_size] }
    }

    pub fn score(&self, prompt: &[u32], response: &[u32]) -> f64 {
        let v = self.vocab_size;
        let mut s = 0.0;
        for &r in response {
            s += self.bias[r as usize];
            for &t in prompt {
                s += self.weights[t as usize * v + r as usize];
            }
        }
        s
    }

    /// `-ln σ(score(preferred) - score(other))`.
    pub fn pair_loss(&self, pair: &PreferencePair) -> f64 {
        let (w, l) = pair.winner_loser();
        softplus(-(self.score(&pair.prompt, w) - self.score(&pair.prompt, l)))
    }

    fn check(&self, pair: &PreferencePair) -> Result<()> {
        for &t in pair.prompt.iter().chain(&pair.a).chain(&pair.b) {
            if t as usize >= self.vocab_size {
                return Err(Error::TokenOutOfRange { id: t, vocab: self.vocab_size });
            }
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardFit {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accuracy: f64,
}

/// Full-batch Bradley-Terry training from zero initialization.
pub fn train_reward_model(
    pairs: &[PreferencePair],
    vocab_size: usize,
    epochs: usize,
    lr: f64,
) -> Result<(RewardModel, RewardFit)> {
    if pairs.is_empty() {
        return Err(invalid("no preference pairs"));
    }
    let mut model = RewardModel::zeros(vocab_size);
    for p in pairs {
        model.check(p)?;
    }
    let v = vocab_size;
    let mean_loss = |m: &RewardModel| pairs.iter().map(|p| m.pair_loss(p)).sum::<f64>() / pairs.len() as f64;
    let initial_loss = mean_loss(&model);
    let settings = OptimizerSettings { lr, clip_norm: 0.0, ..OptimizerSettings::default() };
    let mut adam = Adam::new(v * v + v);
    let mut flat = vec![0.0; v * v + v];
    for _ in 0..epochs {
        let mut grad = vec![0.0; v * v + v];
        for p in pairs {
            let (w, l) = p.winner_loser();
            let margin = model.score(&p.prompt, w) - model.score(&p.prompt, l);
            let g = -sigmoid(-margin) / pairs.len() as f64;
            for (resp, sign) in [(w, 1.0), (l, -1.0)] {
                for &r in resp {
                    grad[v * v + r as usize] += sign * g;
                    for &t in &p.prompt {
                        grad[t as usize * v + r as usize] += sign * g;
                    }
                }
            }
        }
        adam.step(&mut flat, &mut grad, &settings);
        model.weights.copy_from_slice(&flat[..v * v]);
        model.bias.copy_from_slice(&flat[v * v..]);
    }
    let accuracy = pairs
        .iter()
        .filter(|p| {
            let (w, l) = p.winner_loser();
            model.score(&p.prompt, w) > model.score(&p.prompt, l)
        })
        .count() as f64
        / pairs.len() as f64;
    let final_loss = mean_loss(&model);
    Ok((model, RewardFit { initial_loss, final_loss, accuracy }))
}

/// Tokens that can fill `slot`.
fn slot_candidates(world: &WorldStructure, slot: AnswerSlot, entity: &str) -> Result<Vec<String>> {
    let c = &world.config;
    Ok(match slot {
        AnswerSlot::Capital => world.names(&world.entities_of_kind(EntityKind::City))?,
        AnswerSlot::Row => (0..c.grid_size).map(row_token).collect(),
        AnswerSlot::Column => (0..c.grid_size).map(col_token).collect(),
        AnswerSlot::Era => (0..c.n_eras).map(era_token).collect(),
        AnswerSlot::Resembles => {
            world.names(&world.entities_of_kind(EntityKind::Color))?.into_iter().filter(|n| n != entity).collect()
        }
    })
}

/// Ground-truth preferences: for each prompt the world's answer is preferred
/// over every other token that could fill the same slot. Which side holds
/// the preferred answer alternates.
pub fn synthesize_preferences(world: &WorldStructure, vocab: &Vocab, prompts: &PromptSet) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::new();
    for p in &prompts.prompts {
        let truth = crate::corpus::ground_truth(world, p.slot, &p.entity)?;
        let good = vocab.id(&truth)?;
        for c in slot_candidates(world, p.slot, &p.entity)? {
            if c == truth {
                continue;
            }
            let bad = vocab.id(&c)?;
            let pair = if pairs.len() % 2 == 0 {
                PreferencePair { prompt: p.tokens.clone(), a: vec![good], b: vec![bad], preferred: Preferred::A }
            } else {
                PreferencePair { prompt: p.tokens.clone(), a: vec![bad], b: vec![good], preferred: Preferred::B }
            };
            pairs.push(pair);
        }
    }
    Ok(pairs)
}
