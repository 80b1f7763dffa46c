// SPDX-License-Identifier: MIT OR Apache-2.0

//! Internal point sets, dissimilarity matrices and the statistics that
//! compare them to external structures.

mod analogy;
mod probe;
mod rdm;
mod rsa;

pub use analogy::analogy_consistency;
pub use probe::{
    cross_fitted_ordering, fit_probe, ordering_correspondence, ordering_shuffle_test, r_squared, ProbeModel,
};
pub use rdm::{rdm, rdm_of_vectors, DissimilarityMatrix, RdmMetric};
pub use rsa::{permutation_test, rsa_score, PermutationResult};

pub(crate) use rdm::euclidean;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, BOS};
use crate::error::{invalid, Error, Result};
use crate::model::{Hooks, LanguageModel};

/// Where a point set was read from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureMeta {
    pub layer: usize,
    /// Token position the vectors were read from.
    pub position: usize,
    /// Prompt with `{}` marking the entity slot.
    pub template: String,
}

/// One activation vector per entity, all captured at the same site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub entities: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub meta: CaptureMeta,
}

impl PointSet {
    pub fn new(entities: Vec<String>, vectors: Vec<Vec<f64>>, meta: CaptureMeta) -> Result<Self> {
        if entities.len() != vectors.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} entities but {} vectors",
                entities.len(),
                vectors.len()
            )));
        }
        if let Some(w) = vectors.first().map(Vec::len) {
            if vectors.iter().any(|v| v.len() != w) {
                return Err(Error::ShapeMismatch("vectors differ in width".into()));
            }
        }
        Ok(Self { entities, vectors, meta })
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn width(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, entity: &str) -> Option<usize> {
        self.entities.iter().position(|e| e == entity)
    }
}

/// Tokenize a space-separated template with one `{}` slot, prefixed by BOS.
/// Returns the ids and the slot position.
pub fn fill_template(vocab: &Vocab, template: &str, entity: &str) -> Result<(Vec<u32>, usize)> {
    let words: Vec<&str> = template.split_whitespace().collect();
    let slots: Vec<usize> = words.iter().enumerate().filter(|(_, w)| **w == "{}").map(|(i, _)| i).collect();
    if slots.len() != 1 {
        return Err(invalid(format!("template {template:?} must have exactly one {{}} slot")));
    }
    let mut ids = vec![BOS];
    for w in &words {
        ids.push(vocab.id(if *w == "{}" { entity } else { w })?);
    }
    Ok((ids, slots[0] + 1))
}

/// Token position a point set is read from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureSite {
    #[default]
    Entity,
    /// Last token of the filled template.
    Final,
}

/// Residual at `layer` and the entity token's position, one forward pass per
/// entity.
pub fn collect_points(
    model: &dyn LanguageModel,
    vocab: &Vocab,
    entities: &[String],
    template: &str,
    layer: usize,
) -> Result<PointSet> {
    collect_points_at(model, vocab, entities, template, layer, CaptureSite::Entity)
}

pub fn collect_points_at(
    model: &dyn LanguageModel,
    vocab: &Vocab,
    entities: &[String],
    template: &str,
    layer: usize,
    site: CaptureSite,
) -> Result<PointSet> {
    let shape = model.shape();
    if layer >= shape.n_layers {
        return Err(invalid(format!("layer {layer} out of range (model has {})", shape.n_layers)));
    }
    let filled: Vec<(Vec<u32>, usize)> = entities
        .iter()
        .map(|e| {
            let (ids, slot) = fill_template(vocab, template, e)?;
            let pos = match site {
                CaptureSite::Entity => slot,
                CaptureSite::Final => ids.len() - 1,
            };
            Ok((ids, pos))
        })
        .collect::<Result<_>>()?;
    let position = filled.first().map_or(0, |f| f.1);
    let vectors = filled
        .par_iter()
        .map(|(ids, pos)| Ok(model.forward_with_trace(ids, &Hooks::new())?.trace.at(layer, *pos)?.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    PointSet::new(
        entities.to_vec(),
        vectors,
        CaptureMeta { layer, position, template: template.to_string() },
    )
}
