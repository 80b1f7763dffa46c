// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::world::{EntityKind, Relation, WorldStructure};

use super::{col_token, era_token, row_token, Corpus, Vocab, BOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFamily {
    Capital,
    Location,
    Year,
    Color,
}

impl PromptFamily {
    pub fn entity_kind(self) -> EntityKind {
        match self {
            PromptFamily::Capital => EntityKind::Country,
            PromptFamily::Location | PromptFamily::Year => EntityKind::Landmark,
            PromptFamily::Color => EntityKind::Color,
        }
    }
}

/// What a prompt asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSlot {
    Capital,
    Row,
    Column,
    Era,
    Resembles,
}

/// A query prefix with its two answer keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub family: PromptFamily,
    pub slot: AnswerSlot,
    pub entity: String,
    pub text: String,
    pub tokens: Vec<u32>,
    /// Index of the entity token within `tokens`.
    pub entity_position: usize,
    pub ground_truth: String,
    pub corpus_modal: String,
    /// Keys differ.
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub family: PromptFamily,
    pub prompts: Vec<Prompt>,
}

/// The answer a world gives to a slot for an entity.
pub fn ground_truth(world: &WorldStructure, slot: AnswerSlot, entity: &str) -> Result<String> {
    let id = world.entity_by_name(entity)?.id;
    Ok(match slot {
        AnswerSlot::Capital => world.entity(world.capital(id)?)?.name.clone(),
        AnswerSlot::Row => row_token(position(world, id)?.row),
        AnswerSlot::Column => col_token(position(world, id)?.col),
        AnswerSlot::Era => era_token(world.era(id)?),
        AnswerSlot::Resembles => {
            let n = world.neighbors(id, Relation::ColorCoord)?;
            world.entity(*n.first().ok_or_else(|| invalid("a color needs a neighbour"))?)?.name.clone()
        }
    })
}

fn position(world: &WorldStructure, id: usize) -> Result<crate::world::GridPos> {
    world.position.get(&id).copied().ok_or_else(|| Error::UnknownEntity(format!("{id} is not a landmark")))
}

/// Most frequent token following the exact prefix across all sequences;
/// ties go to the smallest id.
pub fn corpus_modal(corpus: &Corpus, prefix: &[u32]) -> Result<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for s in &corpus.sequences {
        if s.len() > prefix.len() && s.starts_with(prefix) {
            *counts.entry(s[prefix.len()]).or_insert(0) += 1;
        }
    }
    let mut best: Option<(u32, usize)> = None;
    for (&tok, &n) in &counts {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((tok, n));
        }
    }
    best.map(|(t, _)| t).ok_or_else(|| {
        let text = corpus.vocab.decode(prefix).map(|w| w.join(" ")).unwrap_or_default();
        invalid(format!("prompt \"{text}\" never occurs in the corpus"))
    })
}

/// "<bos> the capital of C", which elicits "is".
pub fn country_name_prompt(vocab: &Vocab, country: &str) -> Result<Vec<u32>> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(&["the", "capital", "of", country])?);
    Ok(ids)
}

fn build(world: &WorldStructure, corpus: &Corpus, slot: AnswerSlot, family: PromptFamily, entity: &str) -> Result<Prompt> {
    let id = world.entity_by_name(entity)?.id;
    let (words, entity_position): (Vec<String>, usize) = match slot {
        AnswerSlot::Capital => (["the", "capital", "of", entity, "is"].map(String::from).to_vec(), 4),
        AnswerSlot::Row => ([entity, "is", "at", "row"].map(String::from).to_vec(), 1),
        AnswerSlot::Column => {
            let row = row_token(position(world, id)?.row);
            ([entity, "is", "at", "row", &row, "column"].map(String::from).to_vec(), 1)
        }
        AnswerSlot::Era => ([entity, "was", "founded", "in"].map(String::from).to_vec(), 1),
        AnswerSlot::Resembles => ([entity, "resembles"].map(String::from).to_vec(), 1),
    };
    let mut tokens = vec![BOS];
    tokens.extend(corpus.vocab.encode(&words.iter().map(String::as_str).collect::<Vec<_>>())?);
    let truth = ground_truth(world, slot, entity)?;
    let modal = corpus.vocab.token(corpus_modal(corpus, &tokens)?)?.to_string();
    let mut text = vec!["<bos>".to_string()];
    text.extend(words);
    Ok(Prompt {
        family,
        slot,
        entity: entity.to_string(),
        text: text.join(" "),
        tokens,
        entity_position,
        diverged: truth != modal,
        ground_truth: truth,
        corpus_modal: modal,
    })
}

/// Every prompt of a family with its world and corpus answer keys.
/// Location prompts come in row/column pairs per landmark.
pub fn eval_prompt_set(world: &WorldStructure, corpus: &Corpus, family: PromptFamily) -> Result<PromptSet> {
    let ids = world.entities_of_kind(family.entity_kind());
    let mut prompts = Vec::new();
    for name in world.names(&ids)? {
        match family {
            PromptFamily::Capital => prompts.push(build(world, corpus, AnswerSlot::Capital, family, &name)?),
            PromptFamily::Location => {
                prompts.push(build(world, corpus, AnswerSlot::Row, family, &name)?);
                prompts.push(build(world, corpus, AnswerSlot::Column, family, &name)?);
            }
            PromptFamily::Year => prompts.push(build(world, corpus, AnswerSlot::Era, family, &name)?),
            PromptFamily::Color => prompts.push(build(world, corpus, AnswerSlot::Resembles, family, &name)?),
        }
    }
    Ok(PromptSet { family, prompts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::world::{generate_world, shift_world, WorldConfig};

    fn setup(delta: f64) -> (WorldStructure, Corpus) {
        let w = generate_world(7, &WorldConfig::default()).unwrap();
        let c = generate_corpus(&w, &CorpusConfig { delta, n_tokens: 20_000, seed: 1, ..CorpusConfig::default() }).unwrap();
        (w, c)
    }

    #[test]
    fn capital_keys_agree_exactly_off_the_diverged_set() {
        let (w, c) = setup(0.25);
        let set = eval_prompt_set(&w, &c, PromptFamily::Capital).unwrap();
        assert_eq!(set.prompts.len(), 20);
        for p in &set.prompts {
            let is_div = c.diverged.contains(&p.entity);
            assert_eq!(p.diverged, is_div, "{}", p.entity);
            if is_div {
                assert_eq!(p.corpus_modal, c.distractors[&p.entity]);
            } else {
                assert_eq!(p.corpus_modal, p.ground_truth);
            }
            assert_eq!(c.vocab.token(p.tokens[p.entity_position]).unwrap(), p.entity);
        }
    }

    #[test]
    fn shift_changes_truth_but_not_corpus_key() {
        let (w, c) = setup(0.0);
        let country = w.entities_of_kind(EntityKind::Country)[0];
        let name = w.entity(country).unwrap().name.clone();
        let old = w.entity(w.capital(country).unwrap()).unwrap().name.clone();
        let new_city = w.non_capital_cities()[0];
        let shifted = shift_world(&w, country, new_city).unwrap();
        let before = build(&w, &c, AnswerSlot::Capital, PromptFamily::Capital, &name).unwrap();
        let after = build(&shifted, &c, AnswerSlot::Capital, PromptFamily::Capital, &name).unwrap();
        assert_eq!(before.corpus_modal, old);
        assert_eq!(after.corpus_modal, old);
        assert_eq!(after.ground_truth, shifted.entity(new_city).unwrap().name);
        assert!(after.diverged);
    }

    #[test]
    fn other_families_are_undiverged() {
        let (w, c) = setup(0.25);
        for fam in [PromptFamily::Location, PromptFamily::Year, PromptFamily::Color] {
            let set = eval_prompt_set(&w, &c, fam).unwrap();
            assert!(!set.prompts.is_empty());
            assert!(set.prompts.iter().all(|p| !p.diverged), "{fam:?}");
        }
    }

    #[test]
    fn modal_ties_go_to_smallest_id() {
        let (_, mut c) = setup(0.0);
        c.sequences = vec![vec![0, 20, 9], vec![0, 20, 7], vec![0, 20]];
        assert_eq!(corpus_modal(&c, &[0, 20]).unwrap(), 7);
        assert!(corpus_modal(&c, &[0, 21]).is_err());
    }
}
