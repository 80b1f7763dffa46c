// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-wired two-layer reference models whose answers are computed from
//! their own (possibly hooked) activations.
//!
//! Every entity token has a layer-0 vector `[W | C | mode]`: `W` holds world
//! coordinates, `C` the top principal coordinates of the entity's PPMI row
//! within its kind, and `mode` is zero. At layer 1 every position copies the
//! post-hook layer-0 vector of the latest entity token and adds `e_mode` when
//! the token is a query word. The final layer-1 vector is decoded by nearest
//! neighbour among the entity's kind, reading only the `W` block (world
//! oracle) or only the `C` block (co-occurrence oracle).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{cooccurrence_structure, eval_prompt_set, ground_truth, AnswerSlot, Corpus, PromptFamily, Vocab, DEFAULT_WINDOW};
use crate::error::{invalid, Result};
use crate::linalg::{center_columns, sorted_sym_eigen, to_matrix};
use crate::model::{
    ActivationTrace, ForwardPass, Hooks, LanguageModel, ModelShape, OptimizerSettings, Regime, StageRecord,
    TrainingProvenance,
};
use crate::world::{EntityKind, Relation, WorldStructure};

pub const ORACLE_LAYERS: usize = 2;
pub const ORACLE_WIDTH: usize = 7;
const W_BLOCK: std::ops::Range<usize> = 0..3;
const C_BLOCK: std::ops::Range<usize> = 3..6;
pub const MODE_DIM: usize = 6;
const OFF_LOGIT: f64 = -50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    WorldExploiting,
    CooccurrenceExploiting,
}

#[derive(Debug, Clone)]
pub struct OracleModel {
    pub kind: OracleKind,
    pub vocab: Vocab,
    /// Layer-0 vector of every entity token.
    pub activations: BTreeMap<u32, Vec<f64>>,
    /// Entity tokens grouped by kind, ascending.
    members: BTreeMap<EntityKind, Vec<u32>>,
    kind_of: BTreeMap<u32, EntityKind>,
    /// What the oracle says for an entity and slot.
    answers: BTreeMap<(u32, AnswerSlotKey), u32>,
    pub provenance: TrainingProvenance,
    is_token: u32,
}

/// `AnswerSlot` with an ordering, for map keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum AnswerSlotKey {
    Capital,
    Row,
    Column,
    Era,
    Resembles,
}

impl From<AnswerSlot> for AnswerSlotKey {
    fn from(s: AnswerSlot) -> Self {
        match s {
            AnswerSlot::Capital => Self::Capital,
            AnswerSlot::Row => Self::Row,
            AnswerSlot::Column => Self::Column,
            AnswerSlot::Era => Self::Era,
            AnswerSlot::Resembles => Self::Resembles,
        }
    }
}

fn slots_of(kind: EntityKind) -> &'static [AnswerSlot] {
    match kind {
        EntityKind::Country => &[AnswerSlot::Capital],
        EntityKind::Landmark => &[AnswerSlot::Row, AnswerSlot::Column, AnswerSlot::Era],
        EntityKind::Color => &[AnswerSlot::Resembles],
        EntityKind::City => &[],
    }
}

/// Slot asked for when the prompt ends in `word` after an entity of `kind`.
fn slot_for(word: &str, kind: EntityKind) -> Option<AnswerSlot> {
    match (word, kind) {
        ("row", EntityKind::Landmark) => Some(AnswerSlot::Row),
        ("column", EntityKind::Landmark) => Some(AnswerSlot::Column),
        ("in", EntityKind::Landmark) => Some(AnswerSlot::Era),
        ("resembles", EntityKind::Color) => Some(AnswerSlot::Resembles),
        ("is", EntityKind::Country) => Some(AnswerSlot::Capital),
        _ => None,
    }
}

/// Default slot when the prompt ends on the entity itself.
fn default_slot(kind: EntityKind) -> Option<AnswerSlot> {
    slots_of(kind).first().copied()
}

/// World block of an entity: positions and scaled year for landmarks, color
/// coordinates for colors, a distinct code for countries and cities.
fn world_block(world: &WorldStructure, id: usize, index_in_kind: usize) -> Result<[f64; 3]> {
    let e = world.entity(id)?;
    Ok(match e.kind {
        EntityKind::Landmark => {
            let p = world.attribute(id, Relation::Position)?;
            let y = world.attribute(id, Relation::FoundedYear)?[0];
            let c = &world.config;
            let span = (c.year_max - c.year_min + 1) as f64;
            [p[0], p[1], (y - c.year_min as f64) / span * c.grid_size as f64]
        }
        EntityKind::Color => {
            let c = world.attribute(id, Relation::ColorCoord)?;
            [c[0], c[1], c[2]]
        }
        EntityKind::Country | EntityKind::City => [index_in_kind as f64, 0.0, 0.0],
    })
}

/// Top-3 principal coordinates of the kind's PPMI rows, zero-padded.
fn cooccurrence_block(corpus: &Corpus, names: &[String]) -> Result<Vec<[f64; 3]>> {
    let s = cooccurrence_structure(corpus, names, DEFAULT_WINDOW)?;
    let (xc, _) = center_columns(&to_matrix(&s.ppmi));
    let (values, vectors) = sorted_sym_eigen(&xc * xc.transpose());
    let top = values.first().copied().unwrap_or(0.0);
    Ok((0..names.len())
        .map(|i| {
            let mut out = [0.0; 3];
            for (k, o) in out.iter_mut().enumerate() {
                if k < values.len() && values[k] > top * 1e-12 && values[k] > 0.0 {
                    *o = vectors[(i, k)] * values[k].sqrt();
                }
            }
            out
        })
        .collect())
}

fn oracle_provenance(kind: OracleKind, fingerprint: String) -> Result<TrainingProvenance> {
    let record = |regime| StageRecord {
        regime,
        data_fingerprint: fingerprint.clone(),
        optimizer: OptimizerSettings { steps: 0, ..OptimizerSettings::default() },
        seeds: BTreeMap::new(),
        loss_curve: Vec::new(),
        heldout_loss: None,
        warnings: vec!["hand-wired oracle; not trained".to_string()],
    };
    let pre = TrainingProvenance::pretrained(record(Regime::Pretrained))?;
    match kind {
        OracleKind::CooccurrenceExploiting => Ok(pre),
        OracleKind::WorldExploiting => pre.with_finetune(record(Regime::Finetuned)),
    }
}

fn build(kind: OracleKind, world: &WorldStructure, corpus: &Corpus) -> Result<OracleModel> {
    world.validate()?;
    let vocab = corpus.vocab.clone();
    if vocab != Vocab::for_world(world)? {
        return Err(invalid("corpus vocabulary does not belong to this world"));
    }
    let mut activations = BTreeMap::new();
    let mut members = BTreeMap::new();
    let mut kind_of = BTreeMap::new();
    for k in [EntityKind::Country, EntityKind::Color, EntityKind::Landmark] {
        let ids = world.entities_of_kind(k);
        let names = world.names(&ids)?;
        let c_rows = cooccurrence_block(corpus, &names)?;
        let mut toks = Vec::with_capacity(ids.len());
        for (i, (&id, name)) in ids.iter().zip(&names).enumerate() {
            let t = vocab.id(name)?;
            let mut v = vec![0.0; ORACLE_WIDTH];
            v[W_BLOCK].copy_from_slice(&world_block(world, id, i)?);
            v[C_BLOCK].copy_from_slice(&c_rows[i]);
            activations.insert(t, v);
            kind_of.insert(t, k);
            toks.push(t);
        }
        members.insert(k, toks);
    }

    let mut answers = BTreeMap::new();
    match kind {
        OracleKind::WorldExploiting => {
            for (&t, &k) in &kind_of {
                for &slot in slots_of(k) {
                    let truth = ground_truth(world, slot, vocab.token(t)?)?;
                    answers.insert((t, slot.into()), vocab.id(&truth)?);
                }
            }
        }
        OracleKind::CooccurrenceExploiting => {
            for fam in [PromptFamily::Capital, PromptFamily::Location, PromptFamily::Year, PromptFamily::Color] {
                for p in eval_prompt_set(world, corpus, fam)?.prompts {
                    answers.insert((vocab.id(&p.entity)?, p.slot.into()), vocab.id(&p.corpus_modal)?);
                }
            }
        }
    }
    let fingerprint = match kind {
        OracleKind::WorldExploiting => format!("oracle:world:{}", world.seed),
        OracleKind::CooccurrenceExploiting => format!("oracle:cooccurrence:{}", corpus.fingerprint()),
    };
    Ok(OracleModel {
        kind,
        is_token: vocab.id("is")?,
        vocab,
        activations,
        members,
        kind_of,
        answers,
        provenance: oracle_provenance(kind, fingerprint)?,
    })
}

/// Oracle whose answers follow world geometry. Its provenance is fine-tuned,
/// so truth tracking is its success standard.
pub fn build_world_oracle(world: &WorldStructure, corpus: &Corpus) -> Result<OracleModel> {
    build(OracleKind::WorldExploiting, world, corpus)
}

/// Oracle whose answers follow co-occurrence geometry and give the
/// corpus-modal continuation. Its provenance is pretrained.
pub fn build_cooccurrence_oracle(world: &WorldStructure, corpus: &Corpus) -> Result<OracleModel> {
    build(OracleKind::CooccurrenceExploiting, world, corpus)
}

impl OracleModel {
    fn read_block(&self) -> std::ops::Range<usize> {
        match self.kind {
            OracleKind::WorldExploiting => W_BLOCK,
            OracleKind::CooccurrenceExploiting => C_BLOCK,
        }
    }

    /// Coordinates of the world block the answer rule compares for `slot`.
    fn dims(&self, slot: AnswerSlot) -> std::ops::Range<usize> {
        match (self.kind, slot) {
            (OracleKind::WorldExploiting, AnswerSlot::Row | AnswerSlot::Column) => 0..2,
            (OracleKind::WorldExploiting, AnswerSlot::Era) => 2..3,
            _ => self.read_block(),
        }
    }

    /// Entity of `kind` whose stored vector is nearest to `x` on `dims`;
    /// ties go to the smallest token id.
    fn nearest(&self, kind: EntityKind, x: &[f64], dims: std::ops::Range<usize>) -> u32 {
        let mut best = (f64::INFINITY, 0u32);
        for &t in &self.members[&kind] {
            let v = &self.activations[&t];
            let d: f64 = dims.clone().map(|j| (x[j] - v[j]).powi(2)).sum();
            if d < best.0 {
                best = (d, t);
            }
        }
        best.1
    }

    fn answer(&self, tokens: &[u32], last_entity: Option<(usize, u32)>, final_vec: &[f64]) -> u32 {
        let Some((_, ent)) = last_entity else {
            return crate::corpus::EOS;
        };
        if final_vec[MODE_DIM] < 0.5 {
            return self.is_token;
        }
        let kind = self.kind_of[&ent];
        let last = *tokens.last().expect("non-empty");
        let word = self.vocab.token(last).unwrap_or("");
        let slot = if last == ent { default_slot(kind) } else { slot_for(word, kind) };
        let Some(slot) = slot else {
            return self.is_token;
        };
        let who = self.nearest(kind, final_vec, self.dims(slot));
        self.answers.get(&(who, slot.into())).copied().unwrap_or(crate::corpus::EOS)
    }
}

impl LanguageModel for OracleModel {
    fn shape(&self) -> ModelShape {
        ModelShape { n_layers: ORACLE_LAYERS, d_model: ORACLE_WIDTH, vocab_size: self.vocab.len(), context: 32 }
    }

    fn forward_with_trace(&self, tokens: &[u32], hooks: &Hooks) -> Result<ForwardPass> {
        let shape = self.shape();
        if tokens.is_empty() || tokens.len() > shape.context {
            return Err(invalid(format!("sequence length {} outside 1..={}", tokens.len(), shape.context)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= shape.vocab_size) {
            return Err(invalid(format!("token id {t} outside vocabulary")));
        }
        hooks.check(ORACLE_LAYERS, tokens.len(), ORACLE_WIDTH)?;
        let n = tokens.len();
        let mut l0: Vec<f64> = tokens
            .iter()
            .flat_map(|t| self.activations.get(t).cloned().unwrap_or_else(|| vec![0.0; ORACLE_WIDTH]))
            .collect();
        hooks.apply(0, &mut l0, ORACLE_WIDTH);

        let mut l1 = vec![0.0; n * ORACLE_WIDTH];
        let mut last_entity: Option<(usize, u32)> = None;
        for (p, &t) in tokens.iter().enumerate() {
            if self.kind_of.contains_key(&t) {
                last_entity = Some((p, t));
            }
            if let Some((q, ent)) = last_entity {
                let row = &mut l1[p * ORACLE_WIDTH..(p + 1) * ORACLE_WIDTH];
                row.copy_from_slice(&l0[q * ORACLE_WIDTH..(q + 1) * ORACLE_WIDTH]);
                let word = self.vocab.token(t)?;
                if slot_for(word, self.kind_of[&ent]).is_some() {
                    row[MODE_DIM] += 1.0;
                }
            }
        }
        hooks.apply(1, &mut l1, ORACLE_WIDTH);

        let final_vec = &l1[(n - 1) * ORACLE_WIDTH..];
        let answer = self.answer(tokens, last_entity, final_vec);
        let mut logits = vec![OFF_LOGIT; shape.vocab_size];
        logits[answer as usize] = 0.0;
        let rows = |m: &[f64]| m.chunks(ORACLE_WIDTH).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let trace = ActivationTrace { residuals: vec![rows(&l0), rows(&l1)], logits: Vec::new() };
        Ok(ForwardPass::from_logits(logits, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{country_name_prompt, generate_corpus, CorpusConfig};
    use crate::success::{statistical_success, truth_success};
    use crate::world::{generate_world, WorldConfig};

    fn setup() -> (WorldStructure, Corpus) {
        let w = generate_world(2, &WorldConfig::default()).unwrap();
        let c = generate_corpus(&w, &CorpusConfig { n_tokens: 30_000, ..CorpusConfig::default() }).unwrap();
        (w, c)
    }

    #[test]
    fn unmodulated_oracles_meet_their_own_standard() {
        let (w, c) = setup();
        let wo = build_world_oracle(&w, &c).unwrap();
        let co = build_cooccurrence_oracle(&w, &c).unwrap();
        for fam in [PromptFamily::Capital, PromptFamily::Location, PromptFamily::Year, PromptFamily::Color] {
            let p = eval_prompt_set(&w, &c, fam).unwrap().prompts;
            assert_eq!(truth_success(&wo, &c.vocab, &p, &w).unwrap().top1, 1.0, "{fam:?}");
            assert_eq!(statistical_success(&co, &c.vocab, &p).unwrap().top1, 1.0, "{fam:?}");
        }
        assert_eq!(wo.provenance.regime(), Regime::Finetuned);
        assert_eq!(co.provenance.regime(), Regime::Pretrained);
    }

    #[test]
    fn cooccurrence_oracle_misses_every_diverged_capital() {
        let (w, c) = setup();
        let co = build_cooccurrence_oracle(&w, &c).unwrap();
        let p = eval_prompt_set(&w, &c, PromptFamily::Capital).unwrap().prompts;
        let div: Vec<_> = p.iter().filter(|q| c.diverged.contains(&q.entity)).cloned().collect();
        assert_eq!(div.len(), 5);
        assert_eq!(truth_success(&co, &c.vocab, &div, &w).unwrap().hits, 0);
    }

    #[test]
    fn name_prompt_answers_is_until_the_mode_is_set() {
        let (w, c) = setup();
        let wo = build_world_oracle(&w, &c).unwrap();
        let name = w.names(&w.entities_of_kind(EntityKind::Country)).unwrap()[3].clone();
        let toks = country_name_prompt(&c.vocab, &name).unwrap();
        let base = wo.forward_with_trace(&toks, &Hooks::new()).unwrap();
        assert_eq!(c.vocab.token(base.argmax()).unwrap(), "is");
        let mut e = vec![0.0; ORACLE_WIDTH];
        e[MODE_DIM] = 1.0;
        let hooked = wo.forward_with_trace(&toks, &Hooks::new().with(1, toks.len() - 1, &e).unwrap()).unwrap();
        let cap = ground_truth(&w, AnswerSlot::Capital, &name).unwrap();
        assert_eq!(c.vocab.token(hooked.argmax()).unwrap(), cap);
    }

    #[test]
    fn cooccurrence_hooks_do_not_move_world_answers() {
        let (w, c) = setup();
        let wo = build_world_oracle(&w, &c).unwrap();
        let p = eval_prompt_set(&w, &c, PromptFamily::Location).unwrap().prompts;
        let mut d = vec![0.0; ORACLE_WIDTH];
        d[C_BLOCK].copy_from_slice(&[40.0, -13.0, 7.0]);
        for q in &p {
            let a = wo.forward_with_trace(&q.tokens, &Hooks::new()).unwrap();
            let b = wo.forward_with_trace(&q.tokens, &Hooks::new().with(0, q.entity_position, &d).unwrap()).unwrap();
            assert_eq!(a.argmax(), b.argmax());
        }
    }

    #[test]
    fn forward_is_deterministic_and_hooks_add() {
        let (w, c) = setup();
        let co = build_cooccurrence_oracle(&w, &c).unwrap();
        let q = &eval_prompt_set(&w, &c, PromptFamily::Color).unwrap().prompts[0];
        let h1 = Hooks::new().with(0, 1, &[0.1, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0]).unwrap();
        let h2 = h1.clone().with(0, 1, &[0.2, 0.0, 0.0, -0.1, 0.3, 0.0, 0.0]).unwrap();
        let sum = Hooks::new().with(0, 1, &[0.30000000000000004, 0.0, 0.0, 0.4, 0.3, 0.0, 0.0]).unwrap();
        let a = co.forward_with_trace(&q.tokens, &h2).unwrap();
        let b = co.forward_with_trace(&q.tokens, &sum).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace, co.forward_with_trace(&q.tokens, &h2).unwrap().trace);
    }
}
