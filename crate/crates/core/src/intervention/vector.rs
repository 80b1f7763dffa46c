// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{country_name_prompt, ground_truth, AnswerSlot, Prompt, Vocab, BOS};
use crate::correspondence::ProbeModel;
use crate::error::{invalid, Error, Result};
use crate::linalg::{pinv, to_matrix};
use crate::model::{reciprocal_rank, Hooks, LanguageModel};
use crate::success::{prompt_outcome, PromptOutcome};
use crate::world::WorldStructure;

fn check_layer(model: &dyn LanguageModel, layer: usize) -> Result<()> {
    let n = model.shape().n_layers;
    if layer >= n {
        return Err(invalid(format!("layer {layer} out of range (model has {n})")));
    }
    Ok(())
}

fn final_residual(model: &dyn LanguageModel, tokens: &[u32], layer: usize) -> Result<Vec<f64>> {
    let out = model.forward_with_trace(tokens, &Hooks::new())?;
    Ok(out.trace.at(layer, tokens.len() - 1)?.to_vec())
}

/// Mean over pairs of `final(a) - final(b)` at `layer`.
pub fn relation_offset(model: &dyn LanguageModel, pairs: &[(Vec<u32>, Vec<u32>)], layer: usize) -> Result<Vec<f64>> {
    check_layer(model, layer)?;
    if pairs.is_empty() {
        return Err(invalid("no prompt pairs"));
    }
    let diffs = pairs
        .par_iter()
        .map(|(a, b)| {
            let (ra, rb) = (final_residual(model, a, layer)?, final_residual(model, b, layer)?);
            Ok(ra.iter().zip(&rb).map(|(x, y)| x - y).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut v = vec![0.0; model.shape().d_model];
    for d in &diffs {
        for (a, b) in v.iter_mut().zip(d) {
            *a += b;
        }
    }
    v.iter_mut().for_each(|x| *x /= diffs.len() as f64);
    Ok(v)
}

/// Offset from "the capital of C" to "the capital of C is" at the final
/// position, averaged over `train_countries`.
pub fn extract_relation_vector(
    model: &dyn LanguageModel,
    vocab: &Vocab,
    train_countries: &[String],
    layer: usize,
) -> Result<Vec<f64>> {
    if train_countries.len() < 2 {
        return Err(invalid("relation vector needs at least two training countries"));
    }
    let pairs = train_countries
        .iter()
        .map(|c| {
            let name = country_name_prompt(vocab, c)?;
            let mut full = name.clone();
            full.push(vocab.id("is")?);
            Ok((full, name))
        })
        .collect::<Result<Vec<_>>>()?;
    relation_offset(model, &pairs, layer)
}

/// A prompt for the vector-addition battery and the answer the relation
/// should produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditionPrompt {
    pub entity: String,
    pub tokens: Vec<u32>,
    pub target: String,
}

/// Country-name prompts targeting each country's capital.
pub fn country_name_battery(world: &WorldStructure, vocab: &Vocab, countries: &[String]) -> Result<Vec<AdditionPrompt>> {
    countries
        .iter()
        .map(|c| {
            Ok(AdditionPrompt {
                entity: c.clone(),
                tokens: country_name_prompt(vocab, c)?,
                target: ground_truth(world, AnswerSlot::Capital, c)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditionRow {
    pub entity: String,
    pub target: String,
    pub baseline: String,
    pub output: String,
    pub changed: bool,
    pub hits_target: bool,
    pub rr_before: f64,
    pub rr_after: f64,
    pub delta_rr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorAdditionReport {
    pub layer: usize,
    pub vector_norm: f64,
    pub rows: Vec<AdditionRow>,
    /// Fraction of prompts whose top-1 output changed.
    pub flip_rate: f64,
    /// Fraction of prompts whose new output is the target.
    pub target_rate: f64,
    pub mean_delta_rr: f64,
}

/// Add `v` at the final position of every prompt and compare with the
/// unhooked run.
pub fn apply_vector_addition(
    model: &dyn LanguageModel,
    vocab: &Vocab,
    prompts: &[AdditionPrompt],
    layer: usize,
    v: &[f64],
) -> Result<VectorAdditionReport> {
    check_layer(model, layer)?;
    if prompts.is_empty() {
        return Err(invalid("no prompts"));
    }
    let rows = prompts
        .par_iter()
        .map(|p| {
            if p.tokens.first() != Some(&BOS) {
                return Err(invalid(format!("prompt for {} does not start with BOS", p.entity)));
            }
            let target = vocab.id(&p.target)?;
            let base = model.forward_with_trace(&p.tokens, &Hooks::new())?;
            let hooked = model.forward_with_trace(&p.tokens, &Hooks::new().with(layer, p.tokens.len() - 1, v)?)?;
            let (b, o) = (base.argmax(), hooked.argmax());
            let rr_before = reciprocal_rank(&base.probs, target)?;
            let rr_after = reciprocal_rank(&hooked.probs, target)?;
            Ok(AdditionRow {
                entity: p.entity.clone(),
                target: p.target.clone(),
                baseline: vocab.token(b)?.to_string(),
                output: vocab.token(o)?.to_string(),
                changed: b != o,
                hits_target: o == target,
                rr_before,
                rr_after,
                delta_rr: rr_after - rr_before,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(VectorAdditionReport {
        layer,
        vector_norm: v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        flip_rate: rows.iter().filter(|r| r.changed).count() as f64 / n,
        target_rate: rows.iter().filter(|r| r.hits_target).count() as f64 / n,
        mean_delta_rr: rows.iter().map(|r| r.delta_rr).sum::<f64>() / n,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbDirection {
    Toward,
    Away,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbOutcome {
    pub entity: String,
    pub before: PromptOutcome,
    pub after: PromptOutcome,
    /// Probe reading before and after the shift.
    pub probe_before: Vec<f64>,
    pub probe_after: Vec<f64>,
    pub shift_norm: f64,
}

/// Shift the residual at the prompt's entity token along the probe so its
/// reading moves toward `truth` (by at most `magnitude`, never past it) or
/// away from it by `magnitude`. The shift is the minimum-norm input change
/// producing that change in the probe's output.
#[allow(clippy::too_many_arguments)]
pub fn probe_perturb(
    model: &dyn LanguageModel,
    vocab: &Vocab,
    world: &WorldStructure,
    prompt: &Prompt,
    layer: usize,
    probe: &ProbeModel,
    truth: &[f64],
    direction: PerturbDirection,
    magnitude: f64,
) -> Result<PerturbOutcome> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(invalid("magnitude must be finite and non-negative"));
    }
    check_layer(model, layer)?;
    let d = model.shape().d_model;
    if probe.input_dim() != d {
        return Err(Error::ShapeMismatch(format!("probe reads {} dims but d_model is {d}", probe.input_dim())));
    }
    if truth.len() != probe.output_dim() {
        return Err(Error::ShapeMismatch("truth and probe output differ in width".into()));
    }
    let base = model.forward_with_trace(&prompt.tokens, &Hooks::new())?;
    let x = base.trace.at(layer, prompt.entity_position)?;
    let y_hat = probe.predict(x);
    let diff: Vec<f64> = match direction {
        PerturbDirection::Toward => truth.iter().zip(&y_hat).map(|(t, p)| t - p).collect(),
        PerturbDirection::Away => y_hat.iter().zip(truth).map(|(p, t)| p - t).collect(),
    };
    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dy: Vec<f64> = match direction {
        PerturbDirection::Toward if norm > 0.0 => diff.iter().map(|v| v / norm * magnitude.min(norm)).collect(),
        PerturbDirection::Toward => vec![0.0; diff.len()],
        PerturbDirection::Away if norm > 0.0 => diff.iter().map(|v| v / norm * magnitude).collect(),
        PerturbDirection::Away => {
            let mut e = vec![0.0; diff.len()];
            e[0] = magnitude;
            e
        }
    };
    let w = to_matrix(&probe.weights);
    let dx = pinv(&w.transpose(), 1e-12) * DVector::from_vec(dy);
    let dx: Vec<f64> = dx.iter().copied().collect();
    let hooks = Hooks::new().with(layer, prompt.entity_position, &dx)?;
    let moved: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
    Ok(PerturbOutcome {
        entity: prompt.entity.clone(),
        before: prompt_outcome(model, vocab, prompt, world, &Hooks::new())?,
        after: prompt_outcome(model, vocab, prompt, world, &hooks)?,
        probe_before: y_hat,
        probe_after: probe.predict(&moved),
        shift_norm: dx.iter().map(|v| v * v).sum::<f64>().sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{eval_prompt_set, generate_corpus, Corpus, CorpusConfig, PromptFamily};
    use crate::correspondence::{collect_points, fit_probe};
    use crate::oracle::{build_world_oracle, OracleModel, MODE_DIM, ORACLE_WIDTH};
    use crate::world::{generate_world, EntityKind, Relation, WorldConfig};

    fn setup() -> (WorldStructure, Corpus, OracleModel) {
        let w = generate_world(4, &WorldConfig::default()).unwrap();
        let c = generate_corpus(&w, &CorpusConfig { n_tokens: 30_000, ..CorpusConfig::default() }).unwrap();
        let o = build_world_oracle(&w, &c).unwrap();
        (w, c, o)
    }

    fn countries(w: &WorldStructure) -> Vec<String> {
        w.names(&w.entities_of_kind(EntityKind::Country)).unwrap()
    }

    #[test]
    fn identical_prompts_give_a_zero_offset() {
        let (w, c, o) = setup();
        let p = country_name_prompt(&c.vocab, &countries(&w)[0]).unwrap();
        let v = relation_offset(&o, &[(p.clone(), p)], 1).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn oracle_offset_is_the_mode_axis_and_transfers() {
        let (w, c, o) = setup();
        let names = countries(&w);
        let (train, held) = names.split_at(10);
        let v = extract_relation_vector(&o, &c.vocab, train, 1).unwrap();
        let mut e = vec![0.0; ORACLE_WIDTH];
        e[MODE_DIM] = 1.0;
        assert_eq!(v, e);
        let rep = apply_vector_addition(&o, &c.vocab, &country_name_battery(&w, &c.vocab, held).unwrap(), 1, &v).unwrap();
        assert_eq!(rep.flip_rate, 1.0);
        assert_eq!(rep.target_rate, 1.0);
        assert!(rep.mean_delta_rr > 0.0);
    }

    #[test]
    fn zero_vector_changes_nothing() {
        let (w, c, o) = setup();
        let battery = country_name_battery(&w, &c.vocab, &countries(&w)).unwrap();
        let rep = apply_vector_addition(&o, &c.vocab, &battery, 1, &[0.0; ORACLE_WIDTH]).unwrap();
        assert_eq!(rep.flip_rate, 0.0);
        assert!(rep.rows.iter().all(|r| r.delta_rr == 0.0));
    }

    #[test]
    fn too_few_countries_or_bad_layer_is_an_error() {
        let (w, c, o) = setup();
        let names = countries(&w);
        assert!(extract_relation_vector(&o, &c.vocab, &names[..1], 1).is_err());
        assert!(extract_relation_vector(&o, &c.vocab, &names, 2).is_err());
    }

    #[test]
    fn away_perturbation_lands_on_the_brute_force_neighbour() {
        let (w, c, o) = setup();
        let lands = w.entities_of_kind(EntityKind::Landmark);
        let names = w.names(&lands).unwrap();
        let pts = collect_points(&o, &c.vocab, &names, "{}", 0).unwrap();
        let attrs: Vec<Vec<f64>> = lands.iter().map(|&l| w.attribute(l, Relation::Position).unwrap()).collect();
        let probe = fit_probe(&pts, &attrs, 1e-9, 0).unwrap();
        let prompts = eval_prompt_set(&w, &c, PromptFamily::Location).unwrap().prompts;
        let m = 40.0;
        let (mut hits, mut expected) = (0, 0);
        for p in &prompts {
            let i = names.iter().position(|n| *n == p.entity).unwrap();
            let out = probe_perturb(&o, &c.vocab, &w, p, 0, &probe, &attrs[i], PerturbDirection::Away, m).unwrap();
            hits += out.after.truth_match as usize;
            // nearest landmark to the shifted reading, by brute force
            let y = &out.probe_after;
            let mut best = (f64::INFINITY, 0);
            for (j, a) in attrs.iter().enumerate() {
                let dist = (a[0] - y[0]).powi(2) + (a[1] - y[1]).powi(2);
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            let k = if p.slot == AnswerSlot::Row { 0 } else { 1 };
            expected += (attrs[best.1][k] == attrs[i][k]) as usize;
        }
        assert_eq!(hits, expected);
        assert!((hits as f64) < 0.5 * prompts.len() as f64);
    }

    #[test]
    fn zero_magnitude_and_negative_magnitude() {
        let (w, c, o) = setup();
        let lands = w.entities_of_kind(EntityKind::Landmark);
        let names = w.names(&lands).unwrap();
        let pts = collect_points(&o, &c.vocab, &names, "{}", 0).unwrap();
        let attrs: Vec<Vec<f64>> = lands.iter().map(|&l| w.attribute(l, Relation::Position).unwrap()).collect();
        let probe = fit_probe(&pts, &attrs, 1e-6, 0).unwrap();
        let p = &eval_prompt_set(&w, &c, PromptFamily::Location).unwrap().prompts[0];
        let out = probe_perturb(&o, &c.vocab, &w, p, 0, &probe, &attrs[0], PerturbDirection::Away, 0.0).unwrap();
        assert_eq!(out.before, out.after);
        assert!(probe_perturb(&o, &c.vocab, &w, p, 0, &probe, &attrs[0], PerturbDirection::Toward, -1.0).is_err());
    }
}
