// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{cooccurrence_structure, eval_prompt_set, Corpus, PromptFamily, DEFAULT_WINDOW};
use crate::correspondence::{collect_points, rdm, rsa_score, DissimilarityMatrix, RdmMetric};
use crate::error::{invalid, Error, Result};
use crate::model::{LanguageModel, Regime, TrainingProvenance};
use crate::stats::derive_seed;
use crate::success::{metric_for_regime, MetricId};
use crate::world::{world_dissimilarity, EntityKind, Relation, WorldStructure};

use super::modulate::{build_modulation_plan, run_modulated_eval, DeltaSuccess, ManipulationCheck, ModulationMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    World,
    Cooccurrence,
}

/// Entity family a report modulates, with its world relation and queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFamily {
    /// Grid positions, queried by row and column prompts.
    Landmarks,
    /// Color coordinates, queried by "resembles" prompts.
    Colors,
    /// Founding years, queried by era prompts.
    Years,
}

impl ReportFamily {
    pub fn relation(self) -> Relation {
        match self {
            ReportFamily::Landmarks => Relation::Position,
            ReportFamily::Colors => Relation::ColorCoord,
            ReportFamily::Years => Relation::FoundedYear,
        }
    }

    pub fn prompts(self) -> PromptFamily {
        match self {
            ReportFamily::Landmarks => PromptFamily::Location,
            ReportFamily::Colors => PromptFamily::Color,
            ReportFamily::Years => PromptFamily::Year,
        }
    }

    pub fn kind(self) -> EntityKind {
        self.relation().kind()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub family: ReportFamily,
    pub layer: usize,
    pub strengths: Vec<f64>,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for ReportSettings {
    fn default() -> Self {
        Self {
            family: ReportFamily::Landmarks,
            layer: 0,
            strengths: vec![0.25, 0.5, 1.0],
            bootstrap_resamples: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub mode: ModulationMode,
    pub strength: f64,
    pub check: Option<ManipulationCheck>,
    /// Why the plan was rejected before evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
    /// Under the regime's metric.
    pub primary: Option<DeltaSuccess>,
    /// Under the other metric.
    pub contrast: Option<DeltaSuccess>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unmodulated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceEntry {
    pub target: StructureKind,
    pub rsa_before: f64,
    /// Full-space RSA after the largest-strength plan.
    pub rsa_after_tighten: Option<f64>,
    pub rsa_after_loosen: Option<f64>,
    pub deltas: Vec<DeltaEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    World,
    Cooccurrence,
    Both,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceRow {
    pub target: StructureKind,
    pub mode: ModulationMode,
    pub strength: f64,
    pub metric: MetricId,
    pub delta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// The three conditions in one place: what the system is for, how well each
/// structure corresponds, and how success depends on each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rubric {
    pub task: String,
    pub correspondence_scores: BTreeMap<StructureKind, f64>,
    pub success_dependence: Vec<DependenceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploitationReport {
    pub task: String,
    pub regime: Regime,
    pub metric: MetricId,
    pub family: ReportFamily,
    pub layer: usize,
    pub n_prompts: usize,
    pub correspondences: Vec<CorrespondenceEntry>,
    pub verdict: Verdict,
    pub rubric: Rubric,
    pub seeds: BTreeMap<String, u64>,
}

fn loosen_at(entry: &CorrespondenceEntry, strength: f64) -> Result<Option<&DeltaSuccess>> {
    let Some(d) = entry.deltas.iter().find(|d| d.mode == ModulationMode::Loosen && d.strength == strength) else {
        return Ok(None);
    };
    if d.rejected.is_some() {
        return Ok(None);
    }
    if d.check.is_none() {
        return Err(Error::ManipulationCheck(format!("{:?} loosen entry has no manipulation check", entry.target)));
    }
    Ok(d.primary.as_ref())
}

/// Compare loosen-mode deltas at the largest strength.
///
/// Disjoint intervals: the lower one wins if it lies below zero. Overlapping
/// intervals that both lie below zero: "both". Anything else is
/// inconclusive.
pub fn decide_verdict(correspondences: &[CorrespondenceEntry]) -> Result<Verdict> {
    let max = correspondences
        .iter()
        .flat_map(|c| c.deltas.iter().map(|d| d.strength))
        .fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(Verdict::Inconclusive);
    }
    let find = |t: StructureKind| correspondences.iter().find(|c| c.target == t);
    let (Some(w), Some(c)) = (find(StructureKind::World), find(StructureKind::Cooccurrence)) else {
        return Ok(Verdict::Inconclusive);
    };
    let (Some(w), Some(c)) = (loosen_at(w, max)?, loosen_at(c, max)?) else {
        return Ok(Verdict::Inconclusive);
    };
    let disjoint = w.ci_high < c.ci_low || c.ci_high < w.ci_low;
    Ok(if disjoint {
        let (low, tag) = if w.ci_high < c.ci_low { (w, Verdict::World) } else { (c, Verdict::Cooccurrence) };
        if low.ci_high < 0.0 {
            tag
        } else {
            Verdict::Inconclusive
        }
    } else if w.ci_high < 0.0 && c.ci_high < 0.0 {
        Verdict::Both
    } else {
        Verdict::Inconclusive
    })
}

/// Modulate the family's geometry toward and away from the world structure
/// and the co-occurrence structure at `settings.layer`, and measure success
/// under the regime's metric.
pub fn exploitation_report(
    model: &dyn LanguageModel,
    provenance: &TrainingProvenance,
    world: &WorldStructure,
    corpus: &Corpus,
    settings: &ReportSettings,
) -> Result<ExploitationReport> {
    if settings.strengths.is_empty() {
        return Err(invalid("strength grid is empty"));
    }
    let metric = metric_for_regime(Some(provenance))?;
    let ids = world.entities_of_kind(settings.family.kind());
    let names = world.names(&ids)?;
    let points = collect_points(model, &corpus.vocab, &names, "{}", settings.layer)?;
    let structures: Vec<(StructureKind, DissimilarityMatrix)> = vec![
        (StructureKind::World, world_dissimilarity(world, &ids, settings.family.relation())?),
        (StructureKind::Cooccurrence, cooccurrence_structure(corpus, &names, DEFAULT_WINDOW)?.dissimilarity),
    ];
    let prompts = eval_prompt_set(world, corpus, settings.family.prompts())?.prompts;
    let internal = rdm(&points, RdmMetric::Euclidean)?;
    let max = settings.strengths.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut correspondences = Vec::new();
    let mut dependence = Vec::new();
    let mut scores = BTreeMap::new();
    for (ti, (kind, target)) in structures.iter().enumerate() {
        let competitor = &structures[1 - ti].1;
        let rsa_before = rsa_score(&internal, target)?;
        scores.insert(*kind, rsa_before);
        let mut entry =
            CorrespondenceEntry { target: *kind, rsa_before, rsa_after_tighten: None, rsa_after_loosen: None, deltas: vec![] };
        for (mi, mode) in [ModulationMode::Tighten, ModulationMode::Loosen].into_iter().enumerate() {
            for (si, &s) in settings.strengths.iter().enumerate() {
                let plan_seed = derive_seed(settings.seed, &[ti as u64, mi as u64, si as u64]);
                let plan = match build_modulation_plan(&points, target, Some(competitor), s, mode, plan_seed) {
                    Ok(p) => p,
                    Err(Error::ManipulationCheck(msg)) => {
                        log::warn!("{kind:?} {mode:?} s={s}: plan rejected: {msg}");
                        entry.deltas.push(DeltaEntry {
                            mode,
                            strength: s,
                            check: None,
                            rejected: Some(msg),
                            primary: None,
                            contrast: None,
                            unmodulated: vec![],
                        });
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let eval = run_modulated_eval(
                    model,
                    &corpus.vocab,
                    world,
                    &plan,
                    &prompts,
                    &metric,
                    settings.bootstrap_resamples,
                    derive_seed(plan_seed, &[0xB007]),
                )?;
                let check = plan.check.clone();
                if s == max {
                    let after = check.as_ref().map(|c| c.full_target.after);
                    match mode {
                        ModulationMode::Tighten => entry.rsa_after_tighten = after,
                        ModulationMode::Loosen => entry.rsa_after_loosen = after,
                    }
                }
                dependence.push(DependenceRow {
                    target: *kind,
                    mode,
                    strength: s,
                    metric: eval.primary.metric,
                    delta: eval.primary.delta,
                    ci_low: eval.primary.ci_low,
                    ci_high: eval.primary.ci_high,
                });
                entry.deltas.push(DeltaEntry {
                    mode,
                    strength: s,
                    check,
                    rejected: None,
                    primary: Some(eval.primary),
                    contrast: Some(eval.contrast),
                    unmodulated: eval.unmodulated,
                });
            }
        }
        correspondences.push(entry);
    }
    let verdict = decide_verdict(&correspondences)?;
    let task = provenance.task_description().to_string();
    Ok(ExploitationReport {
        task: task.clone(),
        regime: provenance.regime(),
        metric: metric.id(),
        family: settings.family,
        layer: settings.layer,
        n_prompts: prompts.len(),
        correspondences,
        verdict,
        rubric: Rubric { task, correspondence_scores: scores, success_dependence: dependence },
        seeds: BTreeMap::from([("modulation".to_string(), settings.seed)]),
    })
}
