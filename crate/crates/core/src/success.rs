// SPDX-License-Identifier: MIT OR Apache-2.0

//! Success metrics keyed by training regime: agreement with the corpus-modal
//! continuation, or with the world.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ground_truth, Prompt, Vocab};
use crate::error::{invalid, Result};
use crate::model::{Hooks, LanguageModel, Regime, TrainingProvenance};
use crate::world::WorldStructure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    Statistical,
    TruthTracking,
}

/// Which answer key a metric scores against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKey {
    CorpusModal,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessMetric {
    id: MetricId,
    pub description: String,
    pub key: AnswerKey,
}

impl SuccessMetric {
    pub fn new(id: MetricId) -> Self {
        match id {
            MetricId::Statistical => Self {
                id,
                description: "top-1 agreement with the corpus-modal continuation".into(),
                key: AnswerKey::CorpusModal,
            },
            MetricId::TruthTracking => Self {
                id,
                description: "top-1 agreement with the world's answer".into(),
                key: AnswerKey::GroundTruth,
            },
        }
    }

    pub fn id(&self) -> MetricId {
        self.id
    }

    pub fn other(&self) -> Self {
        Self::new(match self.id {
            MetricId::Statistical => MetricId::TruthTracking,
            MetricId::TruthTracking => MetricId::Statistical,
        })
    }
}

/// Pretrained models are held to the statistical standard, fine-tuned
/// models to truth tracking.
pub fn metric_for_regime(provenance: Option<&TrainingProvenance>) -> Result<SuccessMetric> {
    let p = provenance.ok_or_else(|| invalid("no training provenance: cannot choose a success metric"))?;
    Ok(SuccessMetric::new(match p.regime() {
        Regime::Pretrained => MetricId::Statistical,
        Regime::Finetuned => MetricId::TruthTracking,
    }))
}

/// Greedy answer to one prompt and how it scores against both keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub predicted: String,
    pub modal_match: bool,
    pub truth_match: bool,
    pub modal_log_prob: f64,
    pub truth_reciprocal_rank: f64,
    pub modal_reciprocal_rank: f64,
}

impl PromptOutcome {
    pub fn success(&self, metric: &SuccessMetric) -> f64 {
        let hit = match metric.key {
            AnswerKey::CorpusModal => self.modal_match,
            AnswerKey::GroundTruth => self.truth_match,
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

/// Score one prompt under `hooks`. The truth key is recomputed from `world`.
pub fn prompt_outcome(
    model: &dyn LanguageModel,
    vocab: &Vocab,
    prompt: &Prompt,
    world: &WorldStructure,
    hooks: &Hooks,
) -> Result<PromptOutcome> {
    let out = model.forward_with_trace(&prompt.tokens, hooks)?;
    let pred = out.argmax();
    let modal = vocab.id(&prompt.corpus_modal)?;
    let truth = vocab.id(&ground_truth(world, prompt.slot, &prompt.entity)?)?;
    Ok(PromptOutcome {
        predicted: vocab.token(pred)?.to_string(),
        modal_match: pred == modal,
        truth_match: pred == truth,
        modal_log_prob: out.log_prob(modal),
        truth_reciprocal_rank: crate::model::reciprocal_rank(&out.probs, truth)?,
        modal_reciprocal_rank: crate::model::reciprocal_rank(&out.probs, modal)?,
    })
}

pub fn outcomes(
    model: &dyn LanguageModel,
    vocab: &Vocab,
    prompts: &[Prompt],
    world: &WorldStructure,
) -> Result<Vec<PromptOutcome>> {
    prompts
        .par_iter()
        .map(|p| prompt_outcome(model, vocab, p, world, &Hooks::new()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticalSuccess {
    pub top1: f64,
    /// Number of prompts answered with the corpus-modal token.
    pub hits: usize,
    pub mean_log_prob: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSuccess {
    pub top1: f64,
    pub hits: usize,
    pub n: usize,
}

/// Agreement with the corpus-modal answers carried by the prompts. Reads no
/// world facts.
pub fn statistical_success(model: &dyn LanguageModel, vocab: &Vocab, prompts: &[Prompt]) -> Result<StatisticalSuccess> {
    if prompts.is_empty() {
        return Ok(StatisticalSuccess { top1: 0.0, hits: 0, mean_log_prob: 0.0, n: 0 });
    }
    let rows = prompts
        .par_iter()
        .map(|p| {
            let out = model.forward_with_trace(&p.tokens, &Hooks::new())?;
            let modal = vocab.id(&p.corpus_modal)?;
            Ok((out.argmax() == modal, out.log_prob(modal)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let hits = rows.iter().filter(|r| r.0).count();
    Ok(StatisticalSuccess {
        top1: hits as f64 / n,
        hits,
        mean_log_prob: (rows.iter().map(|r| r.1).sum::<f64>() / n).min(0.0),
        n: rows.len(),
    })
}

/// Agreement with the answers `world` gives to the prompts.
pub fn truth_success(
    model: &dyn LanguageModel,
    vocab: &Vocab,
    prompts: &[Prompt],
    world: &WorldStructure,
) -> Result<TruthSuccess> {
    if prompts.is_empty() {
        return Ok(TruthSuccess { top1: 0.0, hits: 0, n: 0 });
    }
    let hits = prompts
        .par_iter()
        .map(|p| {
            let out = model.forward_with_trace(&p.tokens, &Hooks::new())?;
            Ok(out.argmax() == vocab.id(&ground_truth(world, p.slot, &p.entity)?)?)
        })
        .collect::<Result<Vec<bool>>>()?;
    let n = hits.len();
    let hits = hits.iter().filter(|&&h| h).count();
    Ok(TruthSuccess { top1: hits as f64 / n as f64, hits, n })
}

/// Both metrics for a prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub statistical: StatisticalSuccess,
    pub truth: TruthSuccess,
}

pub fn metric_block(
    model: &dyn LanguageModel,
    vocab: &Vocab,
    prompts: &[Prompt],
    world: &WorldStructure,
) -> Result<MetricBlock> {
    Ok(MetricBlock {
        statistical: statistical_success(model, vocab, prompts)?,
        truth: truth_success(model, vocab, prompts, world)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActivationTrace, ForwardPass, ModelShape};
    use crate::corpus::{eval_prompt_set, generate_corpus, CorpusConfig, PromptFamily};
    use crate::world::{generate_world, shift_world, EntityKind, WorldConfig};
    use std::collections::HashMap;

    /// Looks up a fixed answer per prompt and puts all mass on it.
    struct Table {
        answers: HashMap<Vec<u32>, u32>,
        vocab: usize,
    }

    impl LanguageModel for Table {
        fn shape(&self) -> ModelShape {
            ModelShape { n_layers: 1, d_model: 1, vocab_size: self.vocab, context: 32 }
        }

        fn forward_with_trace(&self, tokens: &[u32], _: &Hooks) -> Result<ForwardPass> {
            let mut logits = vec![f64::NEG_INFINITY; self.vocab];
            match self.answers.get(tokens) {
                Some(&a) => logits[a as usize] = 0.0,
                None => logits.iter_mut().for_each(|l| *l = 0.0),
            }
            Ok(ForwardPass::from_logits(logits, ActivationTrace { residuals: vec![], logits: vec![] }))
        }
    }

    fn setup() -> (WorldStructure, crate::corpus::Corpus, Vec<Prompt>) {
        let w = generate_world(3, &WorldConfig::default()).unwrap();
        let c = generate_corpus(&w, &CorpusConfig { n_tokens: 20_000, ..CorpusConfig::default() }).unwrap();
        let p = eval_prompt_set(&w, &c, PromptFamily::Capital).unwrap().prompts;
        (w, c, p)
    }

    fn answering(c: &crate::corpus::Corpus, prompts: &[Prompt], truth: bool) -> Table {
        let answers = prompts
            .iter()
            .map(|p| (p.tokens.clone(), c.vocab.id(if truth { &p.ground_truth } else { &p.corpus_modal }).unwrap()))
            .collect();
        Table { answers, vocab: c.vocab.len() }
    }

    #[test]
    fn modal_model_scores_perfectly_on_statistics() {
        let (w, c, p) = setup();
        let s = statistical_success(&answering(&c, &p, false), &c.vocab, &p).unwrap();
        assert_eq!(s.top1, 1.0);
        assert_eq!(s.mean_log_prob, 0.0);
        let t = truth_success(&answering(&c, &p, true), &c.vocab, &p, &w).unwrap();
        assert_eq!(t.top1, 1.0);
    }

    #[test]
    fn uniform_model_has_log_prob_minus_ln_v() {
        let (_, c, p) = setup();
        let uniform = Table { answers: HashMap::new(), vocab: c.vocab.len() };
        let s = statistical_success(&uniform, &c.vocab, &p).unwrap();
        assert!((s.mean_log_prob + (c.vocab.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn shift_moves_truth_by_one_prompt_only() {
        let (w, c, p) = setup();
        let m = answering(&c, &p, true);
        let country = w
            .entities_of_kind(EntityKind::Country)
            .into_iter()
            .find(|&k| !c.diverged.contains(&w.entity(k).unwrap().name))
            .unwrap();
        let shifted = shift_world(&w, country, w.non_capital_cities()[0]).unwrap();
        let before = truth_success(&m, &c.vocab, &p, &w).unwrap().hits;
        let after = truth_success(&m, &c.vocab, &p, &shifted).unwrap().hits;
        assert_eq!(before - after, 1);
        let s1 = statistical_success(&m, &c.vocab, &p).unwrap();
        let s2 = statistical_success(&m, &c.vocab, &p).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn non_diverged_prompts_score_identically_under_both_keys() {
        let (w, c, p) = setup();
        let agree: Vec<Prompt> = p.into_iter().filter(|q| !q.diverged).collect();
        for m in [answering(&c, &agree, true), Table { answers: HashMap::new(), vocab: c.vocab.len() }] {
            let s = statistical_success(&m, &c.vocab, &agree).unwrap().top1;
            let t = truth_success(&m, &c.vocab, &agree, &w).unwrap().top1;
            assert_eq!(s, t);
        }
    }

    #[test]
    fn regime_selects_metric() {
        assert!(metric_for_regime(None).is_err());
    }
}
