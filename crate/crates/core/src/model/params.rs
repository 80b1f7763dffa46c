// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Hyperparameters of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk-scale shape for a given vocabulary.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self { n_layers: 2, n_heads: 4, d_model: 64, d_ff: 256, context: 32, vocab_size, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.context == 0 || self.vocab_size == 0 {
            return Err(invalid("context and vocabulary must be non-empty"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Offsets of one block's tensors in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Named tensor within the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Placement of every tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub unembed: usize,
    pub total: usize,
    pub tensors: Vec<TensorSpec>,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v, c) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.context);
        let mut tensors = Vec::new();
        let mut cursor = 0usize;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = cursor;
            cursor += shape.iter().product::<usize>();
            tensors.push(TensorSpec { name, shape, offset });
            offset
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![c, d]);
        let blocks = (0..cfg.n_layers)
            .map(|l| BlockOffsets {
                ln1_g: push(format!("blocks.{l}.ln1.gain"), vec![d]),
                ln1_b: push(format!("blocks.{l}.ln1.bias"), vec![d]),
                wq: push(format!("blocks.{l}.attn.wq"), vec![d, d]),
                wk: push(format!("blocks.{l}.attn.wk"), vec![d, d]),
                wv: push(format!("blocks.{l}.attn.wv"), vec![d, d]),
                wo: push(format!("blocks.{l}.attn.wo"), vec![d, d]),
                ln2_g: push(format!("blocks.{l}.ln2.gain"), vec![d]),
                ln2_b: push(format!("blocks.{l}.ln2.bias"), vec![d]),
                w1: push(format!("blocks.{l}.mlp.w1"), vec![d, f]),
                b1: push(format!("blocks.{l}.mlp.b1"), vec![f]),
                w2: push(format!("blocks.{l}.mlp.w2"), vec![f, d]),
                b2: push(format!("blocks.{l}.mlp.b2"), vec![d]),
            })
            .collect();
        let lnf_g = push("ln_final.gain".into(), vec![d]);
        let lnf_b = push("ln_final.bias".into(), vec![d]);
        let unembed = push("unembed".into(), vec![d, v]);
        Self { tok_emb, pos_emb, blocks, lnf_g, lnf_b, unembed, total: cursor, tensors }
    }
}

/// Dense weights of the transformer as one flat vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl ModelParams {
    /// Gaussian initialization (std 0.02, residual projections scaled by
    /// `1/sqrt(2L)`), unit layer-norm gains, zero biases.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std");
        let resid = Normal::new(0.0, resid_std).expect("std");
        for spec in &layout.tensors {
            let slice = &mut data[spec.offset..spec.offset + spec.len()];
            let name = spec.name.as_str();
            if name.ends_with(".gain") {
                slice.fill(1.0);
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                slice.fill(0.0);
            } else if name.ends_with(".wo") || name.ends_with(".w2") {
                slice.iter_mut().for_each(|x| *x = resid.sample(&mut rng));
            } else {
                slice.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            }
        }
        Ok(Self { config: config.clone(), layout, data })
    }

    pub fn from_data(config: &ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        if data.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                layout.total,
                data.len()
            )));
        }
        Ok(Self { config: config.clone(), layout, data })
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let spec = self.layout.tensors.iter().find(|t| t.name == name)?;
        Some(&self.data[spec.offset..spec.offset + spec.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let spec = self.layout.tensors.iter().find(|t| t.name == name)?.clone();
        Some(&mut self.data[spec.offset..spec.offset + spec.len()])
    }
}
