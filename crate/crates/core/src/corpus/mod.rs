// SPDX-License-Identifier: MIT OR Apache-2.0

//! Template corpus generated from a world, with a controlled fraction of
//! countries whose most frequent capital pairing is a distractor city.

mod cooccurrence;
mod prompts;
mod vocab;

pub use cooccurrence::{cooccurrence_structure, pair_counts, CooccurrenceStructure, DEFAULT_WINDOW};
pub use prompts::{
    corpus_modal, country_name_prompt, eval_prompt_set, ground_truth, AnswerSlot, Prompt,
    PromptFamily, PromptSet,
};
pub use vocab::{col_token, era_token, row_token, Vocab, BOS, EOS, FUNCTION_WORDS, MAX_VOCAB, PAD, UNK};

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::world::{EntityId, EntityKind, Relation, WorldStructure};

pub const CORPUS_SCHEMA: &str = "structcorr.corpus/v1";

/// Occurrences of the distractor per occurrence of the true capital for a
/// diverged country.
pub const DIVERGENCE_RATIO: usize = 3;

/// Relative sampling weights of the sentence templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateMix {
    /// "the capital of C is X"
    pub capital: f64,
    /// "L is at row rR column cC"
    pub location: f64,
    /// "L is near M"
    pub near: f64,
    /// "L was founded in eraK"
    pub year: f64,
    /// "K resembles K2"
    pub resembles: f64,
}

impl Default for TemplateMix {
    fn default() -> Self {
        Self { capital: 0.4, location: 0.2, near: 0.15, year: 0.15, resembles: 0.1 }
    }
}

impl TemplateMix {
    fn weights(&self) -> [f64; 5] {
        [self.capital, self.location, self.near, self.year, self.resembles]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Fraction of countries whose modal capital pairing is a distractor.
    pub delta: f64,
    /// Generation stops once at least this many tokens (BOS/EOS included)
    /// have been emitted.
    pub n_tokens: usize,
    pub seed: u64,
    pub templates: TemplateMix,
    pub heldout_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { delta: 0.25, n_tokens: 300_000, seed: 0, templates: TemplateMix::default(), heldout_fraction: 0.1 }
    }
}

/// Token sequences (one sentence each) plus generation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocab,
    pub sequences: Vec<Vec<u32>>,
    pub held_out: Vec<bool>,
    /// Country names, in id order.
    pub diverged: Vec<String>,
    /// Diverged country -> distractor city.
    pub distractors: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusMeta {
    schema: String,
    config: CorpusConfig,
    diverged: Vec<String>,
    distractors: BTreeMap<String, String>,
    n_sequences: usize,
    n_tokens: usize,
}

#[derive(Serialize, Deserialize)]
struct Line {
    ids: Vec<u32>,
    held_out: bool,
}

impl Corpus {
    pub fn n_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn train_sequences(&self) -> impl Iterator<Item = &[u32]> {
        self.sequences.iter().zip(&self.held_out).filter(|(_, &h)| !h).map(|(s, _)| s.as_slice())
    }

    pub fn heldout_sequences(&self) -> impl Iterator<Item = &[u32]> {
        self.sequences.iter().zip(&self.held_out).filter(|(_, &h)| h).map(|(s, _)| s.as_slice())
    }

    /// SHA-256 over the sequences and split flags.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (s, &held) in self.sequences.iter().zip(&self.held_out) {
            h.update((s.len() as u32).to_le_bytes());
            for id in s {
                h.update(id.to_le_bytes());
            }
            h.update([held as u8]);
        }
        hex::encode(h.finalize())
    }

    /// Check every id against the vocabulary and recount the divergence
    /// claim from the sequences.
    pub fn verify(&self, world: &WorldStructure) -> Result<()> {
        let v = self.vocab.len();
        if self.held_out.len() != self.sequences.len() {
            return Err(Error::ShapeMismatch("one split flag per sequence required".into()));
        }
        for s in &self.sequences {
            if let Some(&id) = s.iter().find(|&&id| id as usize >= v) {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
        }
        let counts = pair_counts(&self.sequences, v, DEFAULT_WINDOW);
        let cities = world.entities_of_kind(EntityKind::City);
        let mut observed = Vec::new();
        for country in world.entities_of_kind(EntityKind::Country) {
            let cname = &world.entity(country)?.name;
            let cid = self.vocab.id(cname)? as usize;
            let capital = world.capital(country)?;
            let cap_count = counts[cid * v + self.vocab.id(&world.entity(capital)?.name)? as usize];
            let mut best: Option<(f64, EntityId)> = None;
            for &city in &cities {
                let c = counts[cid * v + self.vocab.id(&world.entity(city)?.name)? as usize];
                if best.is_none_or(|(b, _)| c > b) {
                    best = Some((c, city));
                }
            }
            let (best_count, best_city) = best.ok_or_else(|| invalid("world has no cities"))?;
            if best_city != capital && best_count > cap_count {
                observed.push(cname.clone());
                let claimed = self.distractors.get(cname).map(String::as_str);
                if claimed != Some(world.entity(best_city)?.name.as_str()) {
                    return Err(invalid(format!("{cname}: modal city does not match recorded distractor")));
                }
            }
        }
        if observed != self.diverged {
            return Err(invalid(format!(
                "recorded diverged countries {:?} but counts give {:?}",
                self.diverged, observed
            )));
        }
        Ok(())
    }

    /// Write `corpus.jsonl`, `corpus_meta.json` and `vocab.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join("corpus.jsonl"))?);
        for (s, &held) in self.sequences.iter().zip(&self.held_out) {
            serde_json::to_writer(&mut w, &Line { ids: s.clone(), held_out: held })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let meta = CorpusMeta {
            schema: CORPUS_SCHEMA.into(),
            config: self.config.clone(),
            diverged: self.diverged.clone(),
            distractors: self.distractors.clone(),
            n_sequences: self.sequences.len(),
            n_tokens: self.n_tokens(),
        };
        fs::write(dir.join("corpus_meta.json"), serde_json::to_string_pretty(&meta)?)?;
        fs::write(dir.join("vocab.json"), serde_json::to_string_pretty(&self.vocab)?)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = |name: &str| {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::MissingArtifact(p))
            }
        };
        let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(path("corpus_meta.json")?)?)?;
        if meta.schema != CORPUS_SCHEMA {
            return Err(Error::Schema(format!("expected {CORPUS_SCHEMA}, found {}", meta.schema)));
        }
        let vocab: Vocab = serde_json::from_str(&fs::read_to_string(path("vocab.json")?)?)?;
        let mut sequences = Vec::with_capacity(meta.n_sequences);
        let mut held_out = Vec::with_capacity(meta.n_sequences);
        for line in BufReader::new(fs::File::open(path("corpus.jsonl")?)?).lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(&line)?;
            sequences.push(l.ids);
            held_out.push(l.held_out);
        }
        if sequences.len() != meta.n_sequences {
            return Err(Error::Schema(format!(
                "metadata declares {} sequences, file has {}",
                meta.n_sequences,
                sequences.len()
            )));
        }
        Ok(Self {
            config: meta.config,
            vocab,
            sequences,
            held_out,
            diverged: meta.diverged,
            distractors: meta.distractors,
        })
    }
}

struct Emitter<'a> {
    world: &'a WorldStructure,
    vocab: &'a Vocab,
    sequences: Vec<Vec<u32>>,
    tokens: usize,
    /// Per-country count of capital sentences emitted so far.
    capital_counter: BTreeMap<EntityId, usize>,
    neighbor_counter: BTreeMap<EntityId, usize>,
    distractor: BTreeMap<EntityId, EntityId>,
}

impl Emitter<'_> {
    fn name(&self, id: EntityId) -> Result<&str> {
        Ok(self.world.entity(id)?.name.as_str())
    }

    fn push(&mut self, words: &[&str]) -> Result<()> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        ids.extend(self.vocab.encode(words)?);
        ids.push(EOS);
        self.tokens += ids.len();
        self.sequences.push(ids);
        Ok(())
    }

    fn capital(&mut self, country: EntityId) -> Result<()> {
        let k = self.capital_counter.entry(country).or_insert(0);
        let n = *k;
        *k += 1;
        let city = match self.distractor.get(&country) {
            Some(&d) if n % (DIVERGENCE_RATIO + 1) < DIVERGENCE_RATIO => d,
            _ => self.world.capital(country)?,
        };
        let (c, x) = (self.name(country)?.to_string(), self.name(city)?.to_string());
        self.push(&["the", "capital", "of", &c, "is", &x])
    }

    fn next_neighbor(&mut self, e: EntityId, neighbors: &[EntityId]) -> EntityId {
        let k = self.neighbor_counter.entry(e).or_insert(0);
        let i = NEIGHBOR_CYCLE[*k % NEIGHBOR_CYCLE.len()];
        *k += 1;
        neighbors[i.min(neighbors.len() - 1)]
    }

    fn location(&mut self, landmark: EntityId) -> Result<()> {
        let p = self.world.position[&landmark];
        let l = self.name(landmark)?.to_string();
        self.push(&[&l, "is", "at", "row", &row_token(p.row), "column", &col_token(p.col)])
    }

    fn near(&mut self, landmark: EntityId, other: EntityId) -> Result<()> {
        let (l, m) = (self.name(landmark)?.to_string(), self.name(other)?.to_string());
        self.push(&[&l, "is", "near", &m])
    }

    fn year(&mut self, landmark: EntityId) -> Result<()> {
        let l = self.name(landmark)?.to_string();
        let era = era_token(self.world.era(landmark)?);
        self.push(&[&l, "was", "founded", "in", &era])
    }

    fn resembles(&mut self, color: EntityId, other: EntityId) -> Result<()> {
        let (k, k2) = (self.name(color)?.to_string(), self.name(other)?.to_string());
        self.push(&[&k, "resembles", &k2])
    }
}

/// Order in which the three nearest neighbours are mentioned in
/// "near"/"resembles" sentences: 3:2:1 per cycle, and the nearest leads
/// after every prefix.
const NEIGHBOR_CYCLE: [usize; 6] = [0, 0, 1, 0, 2, 1];

/// Generate the corpus for `world`.
///
/// One sentence per fact is emitted first, then templates are sampled by
/// weight until the token budget is reached.
pub fn generate_corpus(world: &WorldStructure, config: &CorpusConfig) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&config.delta) {
        return Err(invalid(format!("delta {} outside [0, 1]", config.delta)));
    }
    if !(0.0..1.0).contains(&config.heldout_fraction) {
        return Err(invalid("held-out fraction must lie in [0, 1)"));
    }
    let weights = config.templates.weights();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(invalid("template weights must be non-negative with a positive sum"));
    }
    let vocab = Vocab::for_world(world)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let countries = world.entities_of_kind(EntityKind::Country);
    let landmarks = world.entities_of_kind(EntityKind::Landmark);
    let colors = world.entities_of_kind(EntityKind::Color);
    let n_diverged = (config.delta * countries.len() as f64).ceil() as usize;
    let mut order = countries.clone();
    order.shuffle(&mut rng);
    let mut diverged: Vec<EntityId> = order[..n_diverged].to_vec();
    diverged.sort_unstable();
    let pool = world.non_capital_cities();
    if n_diverged > 0 && pool.is_empty() {
        return Err(invalid("diverged countries requested but every city is a capital"));
    }
    let distractor: BTreeMap<EntityId, EntityId> =
        diverged.iter().enumerate().map(|(i, &c)| (c, pool[i % pool.len()])).collect();

    let near: BTreeMap<EntityId, Vec<EntityId>> = landmarks
        .iter()
        .map(|&l| Ok((l, world.neighbors(l, Relation::Position)?.into_iter().take(3).collect())))
        .collect::<Result<_>>()?;
    let resembles: BTreeMap<EntityId, Vec<EntityId>> = colors
        .iter()
        .map(|&c| Ok((c, world.neighbors(c, Relation::ColorCoord)?.into_iter().take(3).collect())))
        .collect::<Result<_>>()?;

    let mut em = Emitter {
        world,
        vocab: &vocab,
        sequences: Vec::new(),
        tokens: 0,
        capital_counter: BTreeMap::new(),
        neighbor_counter: BTreeMap::new(),
        distractor,
    };
    for &c in &countries {
        em.capital(c)?;
    }
    for &l in &landmarks {
        em.location(l)?;
        if !near[&l].is_empty() {
            for _ in NEIGHBOR_CYCLE {
                let m = em.next_neighbor(l, &near[&l]);
                em.near(l, m)?;
            }
        }
        em.year(l)?;
    }
    for &k in &colors {
        if !resembles[&k].is_empty() {
            for _ in NEIGHBOR_CYCLE {
                let k2 = em.next_neighbor(k, &resembles[&k]);
                em.resembles(k, k2)?;
            }
        }
    }

    let families: Vec<(usize, &Vec<EntityId>)> = vec![
        (0, &countries),
        (1, &landmarks),
        (2, &landmarks),
        (3, &landmarks),
        (4, &colors),
    ];
    let usable: Vec<f64> = weights
        .iter()
        .zip(&families)
        .map(|(&w, (f, ents))| {
            let no_pairs = match f {
                2 => ents.iter().all(|e| near[e].is_empty()),
                4 => ents.iter().all(|e| resembles[e].is_empty()),
                _ => false,
            };
            if ents.is_empty() || no_pairs {
                0.0
            } else {
                w
            }
        })
        .collect();
    let dist = WeightedIndex::new(usable).map_err(|e| invalid(format!("template weights: {e}")))?;
    while em.tokens < config.n_tokens {
        let f = dist.sample(&mut rng);
        let ents = families[f].1;
        let e = ents[rng.random_range(0..ents.len())];
        match f {
            0 => em.capital(e)?,
            1 => em.location(e)?,
            2 => {
                if near[&e].is_empty() {
                    continue;
                }
                let m = em.next_neighbor(e, &near[&e]);
                em.near(e, m)?
            }
            3 => em.year(e)?,
            _ => {
                if resembles[&e].is_empty() {
                    continue;
                }
                let k2 = em.next_neighbor(e, &resembles[&e]);
                em.resembles(e, k2)?
            }
        }
    }

    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
    split_rng.set_stream(1);
    let held_out = em.sequences.iter().map(|_| split_rng.random::<f64>() < config.heldout_fraction).collect();

    let corpus = Corpus {
        config: config.clone(),
        diverged: world.names(&diverged)?,
        distractors: em
            .distractor
            .iter()
            .map(|(&c, &d)| Ok((world.entity(c)?.name.clone(), world.entity(d)?.name.clone())))
            .collect::<Result<_>>()?,
        sequences: em.sequences,
        held_out,
        vocab,
    };
    corpus.verify(world)?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldConfig};

    fn world() -> WorldStructure {
        generate_world(7, &WorldConfig::default()).unwrap()
    }

    fn small(delta: f64) -> CorpusConfig {
        CorpusConfig { delta, n_tokens: 20_000, seed: 3, ..CorpusConfig::default() }
    }

    /// Country -> city counts from the capital template, by direct scan.
    fn capital_counts(c: &Corpus) -> BTreeMap<(String, String), usize> {
        let mut out = BTreeMap::new();
        for s in &c.sequences {
            let words = c.vocab.decode(s).unwrap();
            if words.len() == 8 && words[1] == "the" && words[2] == "capital" {
                *out.entry((words[4].to_string(), words[6].to_string())).or_insert(0) += 1;
            }
        }
        out
    }

    #[test]
    fn zero_delta_keeps_every_capital_modal() {
        let w = world();
        let c = generate_corpus(&w, &small(0.0)).unwrap();
        assert!(c.diverged.is_empty());
        let counts = capital_counts(&c);
        for country in w.entities_of_kind(EntityKind::Country) {
            let name = &w.entity(country).unwrap().name;
            let cap = &w.entity(w.capital(country).unwrap()).unwrap().name;
            for ((k, city), n) in &counts {
                if k == name && city != cap {
                    panic!("{name} paired with {city} {n} times");
                }
            }
        }
    }

    #[test]
    fn quarter_delta_diverges_five_countries_by_count() {
        let w = world();
        let c = generate_corpus(&w, &small(0.25)).unwrap();
        assert_eq!(c.diverged.len(), 5);
        let counts = capital_counts(&c);
        for name in &c.diverged {
            let country = w.entity_by_name(name).unwrap().id;
            let cap = w.entity(w.capital(country).unwrap()).unwrap().name.clone();
            let distractor = &c.distractors[name];
            let nd = counts.get(&(name.clone(), distractor.clone())).copied().unwrap_or(0);
            let nc = counts.get(&(name.clone(), cap)).copied().unwrap_or(0);
            assert!(nd > nc, "{name}: {nd} vs {nc}");
            assert!(nd <= 3 * nc + 3);
        }
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let w = world();
        let a = generate_corpus(&w, &small(0.25)).unwrap();
        let b = generate_corpus(&w, &small(0.25)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert!(a.n_tokens() >= 20_000 && a.n_tokens() < 20_020);
        assert!(a.sequences.iter().all(|s| s.len() <= 12));
        let held = a.held_out.iter().filter(|&&h| h).count() as f64 / a.held_out.len() as f64;
        assert!((held - 0.1).abs() < 0.02, "{held}");
    }

    #[test]
    fn no_spare_cities_is_an_error() {
        let cfg = WorldConfig { n_countries: 4, n_cities: 4, ..WorldConfig::default() };
        let w = generate_world(1, &cfg).unwrap();
        assert!(generate_corpus(&w, &small(0.5)).is_err());
        assert!(generate_corpus(&w, &small(0.0)).is_ok());
    }

    #[test]
    fn bad_delta_rejected() {
        assert!(generate_corpus(&world(), &small(1.5)).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let w = world();
        let c = generate_corpus(&w, &small(0.25)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write_dir(dir.path()).unwrap();
        assert_eq!(Corpus::read_dir(dir.path()).unwrap(), c);
        let missing = Corpus::read_dir(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(missing, Error::MissingArtifact(_)));
    }
}
