// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::correspondence::DissimilarityMatrix;
use crate::error::{invalid, Error, Result};

use super::{Corpus, Vocab};

pub const DEFAULT_WINDOW: usize = 4;

/// Symmetric windowed co-occurrence counts over non-reserved tokens, as a
/// dense row-major `vocab × vocab` matrix. Two tokens co-occur when they sit
/// in the same sequence at most `window` positions apart.
pub fn pair_counts(sequences: &[Vec<u32>], vocab_size: usize, window: usize) -> Vec<f64> {
    let mut counts = vec![0.0; vocab_size * vocab_size];
    for s in sequences {
        for (i, &a) in s.iter().enumerate() {
            if Vocab::is_reserved(a) {
                continue;
            }
            for &b in s.iter().skip(i + 1).take(window) {
                if Vocab::is_reserved(b) {
                    continue;
                }
                counts[a as usize * vocab_size + b as usize] += 1.0;
                counts[b as usize * vocab_size + a as usize] += 1.0;
            }
        }
    }
    counts
}

/// PPMI rows of an entity subset and the distances between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceStructure {
    pub entities: Vec<String>,
    /// Context tokens: every token co-occurring with at least one entity.
    pub contexts: Vec<String>,
    /// One row per entity, one column per context.
    pub ppmi: Vec<Vec<f64>>,
    pub window: usize,
    pub dissimilarity: DissimilarityMatrix,
}

/// Positive pointwise mutual information of each entity with each context
/// token, `max(0, ln(c(w, x) N / (c(w) c(x))))`, with marginals taken over
/// all pair counts. Dissimilarity is the Euclidean distance between rows.
pub fn cooccurrence_structure(corpus: &Corpus, entities: &[String], window: usize) -> Result<CooccurrenceStructure> {
    if window == 0 {
        return Err(invalid("window must be at least 1"));
    }
    let v = corpus.vocab.len();
    let counts = pair_counts(&corpus.sequences, v, window);
    let marg: Vec<f64> = counts.chunks(v).map(|r| r.iter().sum()).collect();
    let total: f64 = marg.iter().sum();
    let ids: Vec<usize> = entities
        .iter()
        .map(|e| {
            let id = corpus.vocab.id(e)? as usize;
            if marg[id] == 0.0 {
                return Err(Error::UnknownToken(format!("{e} never occurs in the corpus")));
            }
            Ok(id)
        })
        .collect::<Result<_>>()?;
    let ctx: Vec<usize> = (0..v).filter(|&x| ids.iter().any(|&w| counts[w * v + x] > 0.0)).collect();
    let ppmi: Vec<Vec<f64>> = ids
        .iter()
        .map(|&w| {
            ctx.iter()
                .map(|&x| {
                    let c = counts[w * v + x];
                    if c == 0.0 {
                        0.0
                    } else {
                        (c * total / (marg[w] * marg[x])).ln().max(0.0)
                    }
                })
                .collect()
        })
        .collect();
    let dissimilarity = DissimilarityMatrix::from_fn(entities.to_vec(), |i, j| {
        crate::correspondence::euclidean(&ppmi[i], &ppmi[j])
    });
    Ok(CooccurrenceStructure {
        entities: entities.to_vec(),
        contexts: ctx.iter().map(|&x| corpus.vocab.tokens()[x].clone()).collect(),
        ppmi,
        window,
        dissimilarity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::world::{generate_world, EntityKind, WorldConfig};
    use std::collections::BTreeMap;

    fn toy(sentences: &[&str]) -> Corpus {
        let mut tokens: Vec<String> = super::super::vocab::RESERVED.iter().map(|s| s.to_string()).collect();
        for s in sentences {
            for w in s.split(' ') {
                if !tokens.iter().any(|t| t == w) {
                    tokens.push(w.to_string());
                }
            }
        }
        let vocab = Vocab::from_tokens(tokens).unwrap();
        let sequences: Vec<Vec<u32>> = sentences
            .iter()
            .map(|s| {
                let mut ids = vec![0];
                ids.extend(s.split(' ').map(|w| vocab.id(w).unwrap()));
                ids.push(1);
                ids
            })
            .collect();
        Corpus {
            config: CorpusConfig::default(),
            held_out: vec![false; sequences.len()],
            sequences,
            vocab,
            diverged: Vec::new(),
            distractors: BTreeMap::new(),
        }
    }

    #[test]
    fn hand_counted_ppmi() {
        // window 1: pairs are adjacent words only
        let c = toy(&["a x", "a x", "b y", "a y"]);
        let s = cooccurrence_structure(&c, &["a".into(), "b".into()], 1).unwrap();
        // counts: a-x 2, b-y 1, a-y 1; N = 2 * 4 = 8
        // marginals: a 3, b 1, x 2, y 2
        assert_eq!(s.contexts, vec!["x".to_string(), "y".to_string()]);
        let ax = (2.0f64 * 8.0 / (3.0 * 2.0)).ln();
        let ay = (1.0f64 * 8.0 / (3.0 * 2.0)).ln();
        let by = (1.0f64 * 8.0 / (1.0 * 2.0)).ln();
        assert!((s.ppmi[0][0] - ax).abs() < 1e-12);
        assert!((s.ppmi[0][1] - ay).abs() < 1e-12);
        assert_eq!(s.ppmi[1][0], 0.0);
        assert!((s.ppmi[1][1] - by).abs() < 1e-12);
        let d = ((ax).powi(2) + (ay - by).powi(2)).sqrt();
        assert!((s.dissimilarity.get(0, 1) - d).abs() < 1e-12);
    }

    #[test]
    fn identical_contexts_give_zero_distance() {
        let c = toy(&["a x y", "b x y"]);
        let s = cooccurrence_structure(&c, &["a".into(), "b".into()], 2).unwrap();
        assert_eq!(s.dissimilarity.get(0, 1), 0.0);
        assert!(s.ppmi.iter().flatten().all(|&p| p >= 0.0));
    }

    #[test]
    fn absent_entity_is_named() {
        let c = toy(&["a x", "zz"]);
        let err = cooccurrence_structure(&c, &["a".into(), "q".into()], 1).unwrap_err();
        assert!(err.to_string().contains('q'));
        let mut c2 = toy(&["a x"]);
        c2.sequences.clear();
        assert!(cooccurrence_structure(&c2, &["a".into()], 1).is_err());
    }

    #[test]
    fn production_counts_match_naive_pair_scan() {
        let w = generate_world(2, &WorldConfig::default()).unwrap();
        let c = generate_corpus(&w, &CorpusConfig { n_tokens: 5_000, ..CorpusConfig::default() }).unwrap();
        let v = c.vocab.len();
        let fast = pair_counts(&c.sequences, v, 4);
        let mut slow = vec![0.0; v * v];
        for s in &c.sequences {
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if i != j && i.abs_diff(j) <= 4 && s[i] > 3 && s[j] > 3 {
                        slow[s[i] as usize * v + s[j] as usize] += 1.0;
                    }
                }
            }
        }
        assert_eq!(fast, slow);
    }

    #[test]
    fn zero_delta_ppmi_argmax_is_the_capital() {
        let w = generate_world(4, &WorldConfig::default()).unwrap();
        let c = generate_corpus(&w, &CorpusConfig { delta: 0.0, n_tokens: 20_000, ..CorpusConfig::default() }).unwrap();
        let countries = w.names(&w.entities_of_kind(EntityKind::Country)).unwrap();
        let s = cooccurrence_structure(&c, &countries, 4).unwrap();
        let cities = w.names(&w.entities_of_kind(EntityKind::City)).unwrap();
        for (i, name) in countries.iter().enumerate() {
            let (best, _) = s
                .contexts
                .iter()
                .zip(&s.ppmi[i])
                .filter(|(ctx, _)| cities.contains(ctx))
                .fold((None, f64::NEG_INFINITY), |acc, (ctx, &p)| if p > acc.1 { (Some(ctx), p) } else { acc });
            let country = w.entity_by_name(name).unwrap().id;
            assert_eq!(best.unwrap(), &w.entity(w.capital(country).unwrap()).unwrap().name);
        }
    }
}
