// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Additive patches on post-block residuals, keyed by `(layer, position)`.
///
/// Adding twice at the same site stores the sum, so `h1` then `h2` is the
/// same patch as `h1 + h2`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hooks {
    patches: BTreeMap<(usize, usize), Vec<f64>>,
}

impl Hooks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn add(&mut self, layer: usize, position: usize, delta: &[f64]) -> Result<()> {
        match self.patches.get_mut(&(layer, position)) {
            Some(existing) => {
                if existing.len() != delta.len() {
                    return Err(Error::ShapeMismatch("hook widths differ at one site".into()));
                }
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            None => {
                self.patches.insert((layer, position), delta.to_vec());
            }
        }
        Ok(())
    }

    pub fn with(mut self, layer: usize, position: usize, delta: &[f64]) -> Result<Self> {
        self.add(layer, position, delta)?;
        Ok(self)
    }

    pub fn get(&self, layer: usize, position: usize) -> Option<&[f64]> {
        self.patches.get(&(layer, position)).map(Vec::as_slice)
    }

    pub fn sites(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.patches.keys().copied()
    }

    pub(crate) fn check(&self, n_layers: usize, len: usize, width: usize) -> Result<()> {
        for (&(layer, pos), v) in &self.patches {
            if layer >= n_layers {
                return Err(invalid(format!("hook layer {layer} out of range (model has {n_layers})")));
            }
            if pos >= len {
                return Err(invalid(format!("hook position {pos} beyond sequence length {len}")));
            }
            if v.len() != width {
                return Err(Error::ShapeMismatch(format!("hook width {} but d_model {width}", v.len())));
            }
        }
        Ok(())
    }

    /// Add this layer's patches to a row-major `positions × width` residual.
    pub(crate) fn apply(&self, layer: usize, residual: &mut [f64], width: usize) {
        for (&(_, pos), v) in self.patches.range((layer, 0)..(layer + 1, 0)) {
            for (x, d) in residual[pos * width..(pos + 1) * width].iter_mut().zip(v) {
                *x += d;
            }
        }
    }
}

/// Residual stream per (layer, position) and final-position logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    /// `residuals[layer][position]` has width `d_model`.
    pub residuals: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<f64>,
}

impl ActivationTrace {
    pub fn at(&self, layer: usize, position: usize) -> Result<&[f64]> {
        self.residuals
            .get(layer)
            .and_then(|l| l.get(position))
            .map(Vec::as_slice)
            .ok_or_else(|| invalid(format!("no residual at layer {layer}, position {position}")))
    }
}

/// Next-token distribution after the last input token, plus its trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub trace: ActivationTrace,
}

impl ForwardPass {
    pub fn from_logits(logits: Vec<f64>, mut trace: ActivationTrace) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        let probs = exp.into_iter().map(|e| e / sum).collect();
        trace.logits = logits.clone();
        Self { logits, probs, trace }
    }

    /// Highest-probability token; ties go to the smallest id.
    pub fn argmax(&self) -> u32 {
        argmax(&self.logits)
    }

    pub fn log_prob(&self, token: u32) -> f64 {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        self.logits[token as usize] - lse
    }
}

pub(crate) fn argmax(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// Static shape shared by trained models and oracles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub context: usize,
}

/// Anything that maps a token sequence and residual hooks to a next-token
/// distribution with a trace.
pub trait LanguageModel: Sync {
    fn shape(&self) -> ModelShape;

    fn forward_with_trace(&self, tokens: &[u32], hooks: &Hooks) -> Result<ForwardPass>;
}

impl LanguageModel for super::ModelParams {
    fn shape(&self) -> ModelShape {
        ModelShape {
            n_layers: self.config.n_layers,
            d_model: self.config.d_model,
            vocab_size: self.config.vocab_size,
            context: self.config.context,
        }
    }

    fn forward_with_trace(&self, tokens: &[u32], hooks: &Hooks) -> Result<ForwardPass> {
        self.forward(tokens, hooks)
    }
}

/// `1 / rank` of `target`, where tokens are ordered by descending probability
/// and ties by ascending id.
pub fn reciprocal_rank(distribution: &[f64], target: u32) -> Result<f64> {
    let t = target as usize;
    let pt = *distribution
        .get(t)
        .ok_or(Error::TokenOutOfRange { id: target, vocab: distribution.len() })?;
    let ahead = distribution
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p > pt || (p == pt && i < t))
        .count();
    Ok(1.0 / (ahead + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reciprocal_rank_cases() {
        let d = [0.1, 0.5, 0.2, 0.15, 0.05];
        assert_eq!(reciprocal_rank(&d, 1).unwrap(), 1.0);
        assert_eq!(reciprocal_rank(&d, 0).unwrap(), 0.25);
        let uniform = [0.2; 5];
        assert_eq!(reciprocal_rank(&uniform, 0).unwrap(), 1.0);
        assert_eq!(reciprocal_rank(&uniform, 4).unwrap(), 0.2);
        assert!(reciprocal_rank(&uniform, 5).is_err());
    }

    #[test]
    fn hooks_accumulate_per_site() {
        let h = Hooks::new().with(0, 1, &[1.0, 2.0]).unwrap().with(0, 1, &[0.5, -2.0]).unwrap();
        assert_eq!(h.get(0, 1).unwrap(), &[1.5, 0.0]);
        assert!(Hooks::new().with(0, 1, &[1.0]).unwrap().add(0, 1, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn apply_only_touches_its_layer() {
        let h = Hooks::new().with(1, 0, &[1.0, 1.0]).unwrap().with(0, 1, &[2.0, 2.0]).unwrap();
        let mut r = vec![0.0; 4];
        h.apply(1, &mut r, 2);
        assert_eq!(r, vec![1.0, 1.0, 0.0, 0.0]);
    }
}
