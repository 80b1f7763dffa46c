// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{cooccurrence_structure, eval_prompt_set, generate_corpus, Corpus, PromptFamily, DEFAULT_WINDOW};
use crate::correspondence::{
    analogy_consistency, collect_points, collect_points_at, fit_probe, ordering_shuffle_test, permutation_test, rdm,
    CaptureSite, DissimilarityMatrix, RdmMetric,
};
use crate::error::{invalid, Error, Result};
use crate::intervention::{
    apply_vector_addition, build_modulation_plan, country_name_battery, exploitation_report, extract_relation_vector,
    probe_perturb, ExploitationReport, ManipulationCheck, ModulationMode, PerturbDirection, PerturbOutcome,
    ReportFamily, ReportSettings, StructureKind, VectorAdditionReport,
};
use crate::model::{
    checkpoint, finetune, pretrain, synthesize_preferences, train_reward_model, LanguageModel, ModelParams, Regime,
    RewardFit, TrainingProvenance,
};
use crate::oracle::{build_cooccurrence_oracle, build_world_oracle, OracleModel};
use crate::stats::{derive_seed, mean};
use crate::success::{metric_block, MetricBlock};
use crate::world::{generate_world, world_dissimilarity, EntityId, EntityKind, Relation, WorldStructure};

use super::config::{ExperimentConfig, FinetuneSpec, Subject};

pub const REPORT_SCHEMA: &str = "structcorr.report/v1";
/// Prompt whose final position carries the founding-year ordering.
pub const YEAR_TEMPLATE: &str = "{} was founded in";

const QUERY_FAMILIES: [PromptFamily; 4] =
    [PromptFamily::Capital, PromptFamily::Location, PromptFamily::Year, PromptFamily::Color];
const CORPUS_FILES: [&str; 3] = ["corpus.jsonl", "corpus_meta.json", "vocab.json"];

/// Where each artifact lives under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn world(&self) -> PathBuf {
        self.root.join("world.json")
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn finetuned(&self) -> PathBuf {
        self.root.join("finetuned.ckpt")
    }

    pub fn document(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.json"))
    }

    pub fn matrix(&self, name: &str) -> PathBuf {
        self.root.join("rdm").join(format!("{name}.csv"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn hash_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(sha256_hex(&fs::read(path)?))
}

/// Envelope of every JSON document the commands write.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document<T> {
    pub schema: String,
    pub command: String,
    /// Config after seed overrides.
    pub config: ExperimentConfig,
    /// SHA-256 of every artifact the command read, keyed by relative path.
    pub inputs: BTreeMap<String, String>,
    pub result: T,
}

impl<T: Serialize> Document<T> {
    pub fn new(command: &str, config: &ExperimentConfig, inputs: BTreeMap<String, String>, result: T) -> Self {
        Self { schema: REPORT_SCHEMA.into(), command: command.into(), config: config.clone(), inputs, result }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<WorldStructure> {
    generate_world(cfg.world.seed, &cfg.world.config)
}

pub fn write_world(layout: &Layout, world: &WorldStructure) -> Result<()> {
    fs::create_dir_all(layout.root())?;
    fs::write(layout.world(), world.to_json()?)?;
    Ok(())
}

pub fn read_world(layout: &Layout, inputs: &mut BTreeMap<String, String>) -> Result<WorldStructure> {
    let path = layout.world();
    inputs.insert("world.json".into(), hash_file(&path)?);
    WorldStructure::from_json(&fs::read_to_string(path)?)
}

pub fn build_corpus(cfg: &ExperimentConfig, world: &WorldStructure) -> Result<Corpus> {
    generate_corpus(world, &cfg.corpus)
}

pub(crate) fn hash_corpus(layout: &Layout, inputs: &mut BTreeMap<String, String>) -> Result<()> {
    for f in CORPUS_FILES {
        inputs.insert(format!("corpus/{f}"), hash_file(&layout.corpus().join(f))?);
    }
    Ok(())
}

pub fn read_corpus(layout: &Layout, world: &WorldStructure, inputs: &mut BTreeMap<String, String>) -> Result<Corpus> {
    hash_corpus(layout, inputs)?;
    let corpus = Corpus::read_dir(&layout.corpus())?;
    corpus.verify(world)?;
    Ok(corpus)
}

pub fn run_pretrain(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<(ModelParams, TrainingProvenance)> {
    if cfg.subject != Subject::Trained {
        return Err(invalid("oracle subjects are not trained"));
    }
    pretrain(&cfg.model.resolve(corpus.vocab.len()), corpus, &cfg.pretrain)
}

/// Reward model on ground-truth preferences for every query family, then
/// rejection-sampling fine-tuning on the same prompts.
pub fn run_finetune(
    spec: &FinetuneSpec,
    world: &WorldStructure,
    corpus: &Corpus,
    params: &ModelParams,
    provenance: &TrainingProvenance,
) -> Result<(ModelParams, TrainingProvenance, RewardFit)> {
    let mut pairs = Vec::new();
    let mut prompts = Vec::new();
    for family in QUERY_FAMILIES {
        let set = eval_prompt_set(world, corpus, family)?;
        pairs.extend(synthesize_preferences(world, &corpus.vocab, &set)?);
        prompts.extend(set.prompts.into_iter().map(|p| p.tokens));
    }
    let (reward, fit) = train_reward_model(&pairs, corpus.vocab.len(), spec.reward_epochs, spec.reward_lr)?;
    let (tuned, prov) = finetune(params, provenance, &reward, &prompts, &spec.settings)?;
    Ok((tuned, prov, fit))
}

/// Save a checkpoint and read it back, so analysis sees the stored
/// precision. Returns the reloaded model and the file's hash.
pub fn save_and_reload(
    path: &Path,
    params: &ModelParams,
    provenance: &TrainingProvenance,
) -> Result<(ModelParams, TrainingProvenance, String)> {
    checkpoint::save(path, params, provenance)?;
    let hash = hash_file(path)?;
    let (p, prov) = checkpoint::load(path)?;
    Ok((p, prov, hash))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub regime: Regime,
    pub family: PromptFamily,
    /// Restricted to diverged countries.
    pub diverged_only: bool,
    pub metrics: MetricBlock,
}

pub fn success_rows(
    model: &dyn LanguageModel,
    world: &WorldStructure,
    corpus: &Corpus,
    regime: Regime,
) -> Result<Vec<SuccessRow>> {
    let mut rows = Vec::new();
    for family in QUERY_FAMILIES {
        let set = eval_prompt_set(world, corpus, family)?;
        let metrics = metric_block(model, &corpus.vocab, &set.prompts, world)?;
        rows.push(SuccessRow { regime, family, diverged_only: false, metrics });
        let diverged: Vec<_> = set.prompts.iter().filter(|p| p.diverged).cloned().collect();
        if !diverged.is_empty() {
            let metrics = metric_block(model, &corpus.vocab, &diverged, world)?;
            rows.push(SuccessRow { regime, family, diverged_only: true, metrics });
        }
    }
    Ok(rows)
}

/// A trained checkpoint or a hand-wired oracle.
pub enum SubjectModel {
    Trained(ModelParams),
    Oracle(Box<OracleModel>),
}

impl SubjectModel {
    pub fn model(&self) -> &dyn LanguageModel {
        match self {
            SubjectModel::Trained(p) => p,
            SubjectModel::Oracle(o) => o.as_ref(),
        }
    }
}

pub fn build_oracle(subject: Subject, world: &WorldStructure, corpus: &Corpus) -> Result<OracleModel> {
    match subject {
        Subject::WorldOracle => build_world_oracle(world, corpus),
        Subject::CooccurrenceOracle => build_cooccurrence_oracle(world, corpus),
        Subject::Trained => Err(invalid("trained subjects are loaded from a checkpoint")),
    }
}

/// The model the analysis commands run on: the last checkpoint of the
/// configured training, or the configured oracle.
pub fn load_subject(
    cfg: &ExperimentConfig,
    layout: &Layout,
    world: &WorldStructure,
    corpus: &Corpus,
    inputs: &mut BTreeMap<String, String>,
) -> Result<(SubjectModel, TrainingProvenance)> {
    match cfg.subject {
        Subject::Trained => {
            let (path, name) = match cfg.finetune {
                Some(_) => (layout.finetuned(), "finetuned.ckpt"),
                None => (layout.pretrained(), "model.ckpt"),
            };
            inputs.insert(name.into(), hash_file(&path)?);
            let (params, prov) = checkpoint::load(&path)?;
            Ok((SubjectModel::Trained(params), prov))
        }
        other => {
            let oracle = build_oracle(other, world, corpus)?;
            let prov = oracle.provenance.clone();
            Ok((SubjectModel::Oracle(Box::new(oracle)), prov))
        }
    }
}

pub fn family_label(family: ReportFamily) -> &'static str {
    match family {
        ReportFamily::Landmarks => "landmarks",
        ReportFamily::Colors => "colors",
        ReportFamily::Years => "years",
    }
}

fn structure_label(kind: StructureKind) -> &'static str {
    match kind {
        StructureKind::World => "world",
        StructureKind::Cooccurrence => "cooccurrence",
    }
}

fn family_entities(world: &WorldStructure, family: ReportFamily) -> Result<(Vec<EntityId>, Vec<String>)> {
    let ids = world.entities_of_kind(family.kind());
    let names = world.names(&ids)?;
    Ok((ids, names))
}

fn structures(
    world: &WorldStructure,
    corpus: &Corpus,
    family: ReportFamily,
) -> Result<Vec<(StructureKind, DissimilarityMatrix)>> {
    let (ids, names) = family_entities(world, family)?;
    Ok(vec![
        (StructureKind::World, world_dissimilarity(world, &ids, family.relation())?),
        (StructureKind::Cooccurrence, cooccurrence_structure(corpus, &names, DEFAULT_WINDOW)?.dissimilarity),
    ])
}

fn check_layers(cfg: &ExperimentConfig, model: &dyn LanguageModel) -> Result<()> {
    let n = model.shape().n_layers;
    if let Some(&l) = cfg.analysis.layers.iter().chain([&cfg.analysis.vector_layer]).find(|&&l| l >= n) {
        return Err(invalid(format!("analysis layer {l} out of range (subject has {n} layers)")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsaRow {
    pub layer: usize,
    pub family: ReportFamily,
    pub structure: StructureKind,
    pub observed: f64,
    pub p_value: f64,
    pub null_95: f64,
}

/// Named matrices to write as CSV alongside a document.
pub type Matrices = Vec<(String, DissimilarityMatrix)>;

pub fn rsa_battery(
    cfg: &ExperimentConfig,
    model: &dyn LanguageModel,
    world: &WorldStructure,
    corpus: &Corpus,
) -> Result<(Vec<RsaRow>, Matrices)> {
    check_layers(cfg, model)?;
    let a = &cfg.analysis;
    let mut rows = Vec::new();
    let mut matrices = Vec::new();
    for (fi, &family) in a.families.iter().enumerate() {
        let (_, names) = family_entities(world, family)?;
        let externals = structures(world, corpus, family)?;
        for (kind, m) in &externals {
            matrices.push((format!("{}_{}", family_label(family), structure_label(*kind)), m.clone()));
        }
        for &layer in &a.layers {
            let points = collect_points(model, &corpus.vocab, &names, "{}", layer)?;
            let internal = rdm(&points, RdmMetric::Euclidean)?;
            for (si, (kind, ext)) in externals.iter().enumerate() {
                let seed = derive_seed(a.seed, &[1, layer as u64, fi as u64, si as u64]);
                let perm = permutation_test(&internal, ext, a.n_perm, seed)?;
                rows.push(RsaRow {
                    layer,
                    family,
                    structure: *kind,
                    observed: perm.observed,
                    p_value: perm.p_value,
                    null_95: perm.null_percentile(95.0),
                });
            }
            matrices.push((format!("{}_layer{layer}", family_label(family)), internal));
        }
    }
    Ok((rows, matrices))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub layer: usize,
    pub family: ReportFamily,
    pub lambda: f64,
    pub train_r2: f64,
    pub heldout_r2: f64,
    pub heldout_entities: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingRow {
    pub layer: usize,
    pub template: String,
    pub lambda: f64,
    pub observed: f64,
    pub p_value: f64,
    pub null_95: f64,
}

pub fn probe_battery(
    cfg: &ExperimentConfig,
    model: &dyn LanguageModel,
    world: &WorldStructure,
    corpus: &Corpus,
) -> Result<(Vec<ProbeRow>, Vec<OrderingRow>)> {
    check_layers(cfg, model)?;
    let a = &cfg.analysis;
    let mut probes = Vec::new();
    for (fi, &family) in a.families.iter().enumerate() {
        let (ids, names) = family_entities(world, family)?;
        let targets = ids.iter().map(|&id| world.attribute(id, family.relation())).collect::<Result<Vec<_>>>()?;
        for &layer in &a.layers {
            let points = collect_points(model, &corpus.vocab, &names, "{}", layer)?;
            let probe = fit_probe(&points, &targets, a.probe_lambda, derive_seed(a.seed, &[2, layer as u64, fi as u64]))?;
            probes.push(ProbeRow {
                layer,
                family,
                lambda: a.probe_lambda,
                train_r2: probe.train_r2,
                heldout_r2: probe.heldout_r2,
                heldout_entities: probe.heldout_entities.clone(),
            });
        }
    }
    let ids = world.entities_of_kind(EntityKind::Landmark);
    let names = world.names(&ids)?;
    let years = ids
        .iter()
        .map(|&id| Ok(world.attribute(id, Relation::FoundedYear)?[0]))
        .collect::<Result<Vec<f64>>>()?;
    let mut ordering = Vec::new();
    for &layer in &a.layers {
        let points = collect_points_at(model, &corpus.vocab, &names, YEAR_TEMPLATE, layer, CaptureSite::Final)?;
        let test = ordering_shuffle_test(&points, &years, a.ordering_lambda, a.n_perm, derive_seed(a.seed, &[3, layer as u64]))?;
        ordering.push(OrderingRow {
            layer,
            template: YEAR_TEMPLATE.into(),
            lambda: a.ordering_lambda,
            observed: test.observed,
            p_value: test.p_value,
            null_95: test.null_percentile(95.0),
        });
    }
    Ok((probes, ordering))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogyRow {
    pub layer: usize,
    pub pairs: usize,
    pub score: f64,
    /// Score of a uniformly random nearest neighbour.
    pub chance: f64,
}

/// Country -> capital offset consistency at each layer.
pub fn analogy_battery(
    cfg: &ExperimentConfig,
    model: &dyn LanguageModel,
    world: &WorldStructure,
    corpus: &Corpus,
) -> Result<Vec<AnalogyRow>> {
    check_layers(cfg, model)?;
    let countries = world.entities_of_kind(EntityKind::Country);
    let capitals = countries.iter().map(|&c| world.capital(c)).collect::<Result<Vec<_>>>()?;
    let (cn, kn) = (world.names(&countries)?, world.names(&capitals)?);
    let n = cn.len();
    cfg.analysis
        .layers
        .iter()
        .map(|&layer| {
            let a = collect_points(model, &corpus.vocab, &cn, "{}", layer)?;
            let b = collect_points(model, &corpus.vocab, &kn, "{}", layer)?;
            Ok(AnalogyRow {
                layer,
                pairs: n,
                score: analogy_consistency(&a.vectors, &b.vectors)?,
                chance: 1.0 / (2 * n - 1) as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorBattery {
    /// Countries the relation vector was averaged over; the report rows
    /// cover the rest.
    pub train_countries: Vec<String>,
    pub report: VectorAdditionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbBattery {
    pub layer: usize,
    pub direction: PerturbDirection,
    pub magnitude: f64,
    pub probe_heldout_r2: f64,
    /// Fraction of prompts whose top-1 answer changed.
    pub flip_rate: f64,
    pub truth_before: f64,
    pub truth_after: f64,
    pub outcomes: Vec<PerturbOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub vector_addition: VectorBattery,
    pub perturbation: Vec<PerturbBattery>,
}

/// Relation-vector addition on country-name prompts, and probe-guided
/// perturbation of landmark positions away from the truth.
pub fn intervention_battery(
    cfg: &ExperimentConfig,
    model: &dyn LanguageModel,
    world: &WorldStructure,
    corpus: &Corpus,
) -> Result<InterventionResult> {
    check_layers(cfg, model)?;
    let a = &cfg.analysis;
    let countries = world.names(&world.entities_of_kind(EntityKind::Country))?;
    let stable: Vec<String> = countries.iter().filter(|c| !corpus.diverged.contains(c)).cloned().collect();
    let train: Vec<String> = stable.iter().take(stable.len().div_ceil(2)).cloned().collect();
    let test: Vec<String> = countries.iter().filter(|c| !train.contains(c)).cloned().collect();
    let v = extract_relation_vector(model, &corpus.vocab, &train, a.vector_layer)?;
    let prompts = country_name_battery(world, &corpus.vocab, &test)?;
    let report = apply_vector_addition(model, &corpus.vocab, &prompts, a.vector_layer, &v)?;

    let ids = world.entities_of_kind(EntityKind::Landmark);
    let names = world.names(&ids)?;
    let truths = ids.iter().map(|&id| world.attribute(id, Relation::Position)).collect::<Result<Vec<_>>>()?;
    let truth_of: BTreeMap<&str, &Vec<f64>> = names.iter().map(String::as_str).zip(&truths).collect();
    let location = eval_prompt_set(world, corpus, PromptFamily::Location)?;
    let mut perturbation = Vec::new();
    for &layer in &a.layers {
        let points = collect_points(model, &corpus.vocab, &names, "{}", layer)?;
        let probe = fit_probe(&points, &truths, a.probe_lambda, derive_seed(a.seed, &[2, layer as u64, u64::MAX]))?;
        let outcomes = location
            .prompts
            .iter()
            .map(|p| {
                let truth = truth_of[p.entity.as_str()];
                probe_perturb(model, &corpus.vocab, world, p, layer, &probe, truth, PerturbDirection::Away, a.perturb_magnitude)
            })
            .collect::<Result<Vec<_>>>()?;
        let rate = |f: &dyn Fn(&PerturbOutcome) -> bool| mean(&outcomes.iter().map(|o| f(o) as u8 as f64).collect::<Vec<_>>());
        perturbation.push(PerturbBattery {
            layer,
            direction: PerturbDirection::Away,
            magnitude: a.perturb_magnitude,
            probe_heldout_r2: probe.heldout_r2,
            flip_rate: rate(&|o| o.before.predicted != o.after.predicted),
            truth_before: rate(&|o| o.before.truth_match),
            truth_after: rate(&|o| o.after.truth_match),
            outcomes,
        });
    }
    Ok(InterventionResult { vector_addition: VectorBattery { train_countries: train, report }, perturbation })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationRow {
    pub layer: usize,
    pub family: ReportFamily,
    pub target: StructureKind,
    pub mode: ModulationMode,
    pub strength: f64,
    /// 95th percentile of target RSA under entity permutation.
    pub target_null_95: f64,
    pub check: Option<ManipulationCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
}

/// Build every modulation plan in the analysis grid and record its
/// manipulation check.
pub fn modulation_battery(
    cfg: &ExperimentConfig,
    model: &dyn LanguageModel,
    world: &WorldStructure,
    corpus: &Corpus,
) -> Result<Vec<ModulationRow>> {
    check_layers(cfg, model)?;
    let a = &cfg.analysis;
    let mut rows = Vec::new();
    for (fi, &family) in a.families.iter().enumerate() {
        let (_, names) = family_entities(world, family)?;
        let st = structures(world, corpus, family)?;
        let nulls = st
            .iter()
            .enumerate()
            .map(|(ti, (_, m))| {
                Ok(permutation_test(m, m, a.n_perm, derive_seed(a.seed, &[5, fi as u64, ti as u64]))?.null_percentile(95.0))
            })
            .collect::<Result<Vec<f64>>>()?;
        for &layer in &a.layers {
            let points = collect_points(model, &corpus.vocab, &names, "{}", layer)?;
            for (ti, (target, t)) in st.iter().enumerate() {
                let competitor = &st[1 - ti].1;
                for (mi, mode) in [ModulationMode::Tighten, ModulationMode::Loosen].into_iter().enumerate() {
                    for (si, &strength) in a.strengths.iter().enumerate() {
                        let seed = derive_seed(a.seed, &[4, layer as u64, fi as u64, ti as u64, mi as u64, si as u64]);
                        let (check, rejected) = match build_modulation_plan(&points, t, Some(competitor), strength, mode, seed) {
                            Ok(plan) => (plan.check, None),
                            Err(Error::ManipulationCheck(msg)) => (None, Some(msg)),
                            Err(e) => return Err(e),
                        };
                        rows.push(ModulationRow {
                            layer,
                            family,
                            target: *target,
                            mode,
                            strength,
                            target_null_95: nulls[ti],
                            check,
                            rejected,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn exploitation_battery(
    cfg: &ExperimentConfig,
    model: &dyn LanguageModel,
    provenance: &TrainingProvenance,
    world: &WorldStructure,
    corpus: &Corpus,
) -> Result<Vec<ExploitationReport>> {
    check_layers(cfg, model)?;
    let a = &cfg.analysis;
    let mut out = Vec::new();
    for &layer in &a.layers {
        for (fi, &family) in a.families.iter().enumerate() {
            let settings = ReportSettings {
                family,
                layer,
                strengths: a.strengths.clone(),
                bootstrap_resamples: a.bootstrap_resamples,
                seed: derive_seed(a.seed, &[6, layer as u64, fi as u64]),
            };
            out.push(exploitation_report(model, provenance, world, corpus, &settings)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub rsa: Vec<RsaRow>,
    pub probes: Vec<ProbeRow>,
    pub ordering: Vec<OrderingRow>,
    pub analogy: Vec<AnalogyRow>,
    pub interventions: InterventionResult,
    pub modulation: Vec<ModulationRow>,
}

/// Body of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub subject: Subject,
    pub provenance: TrainingProvenance,
    pub reward_fit: Option<RewardFit>,
    pub success: Vec<SuccessRow>,
    pub battery: Battery,
    /// One report per analysed layer and family.
    pub exploitation: Vec<ExploitationReport>,
    pub warnings: Vec<String>,
}

/// Every analysis on one subject.
pub fn analyze(
    cfg: &ExperimentConfig,
    model: &dyn LanguageModel,
    provenance: &TrainingProvenance,
    world: &WorldStructure,
    corpus: &Corpus,
) -> Result<(Battery, Vec<ExploitationReport>, Matrices)> {
    let (rsa, matrices) = rsa_battery(cfg, model, world, corpus)?;
    let (probes, ordering) = probe_battery(cfg, model, world, corpus)?;
    let battery = Battery {
        rsa,
        probes,
        ordering,
        analogy: analogy_battery(cfg, model, world, corpus)?,
        interventions: intervention_battery(cfg, model, world, corpus)?,
        modulation: modulation_battery(cfg, model, world, corpus)?,
    };
    let exploitation = exploitation_battery(cfg, model, provenance, world, corpus)?;
    Ok((battery, exploitation, matrices))
}

pub fn write_matrices(layout: &Layout, matrices: &Matrices) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, m) in matrices {
        let path = layout.matrix(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        m.write_csv(fs::File::create(&path)?)?;
        written.push(path);
    }
    Ok(written)
}

/// The whole pipeline from config to `report.json`. Trained models are
/// saved and reloaded before analysis.
pub fn audit(cfg: &ExperimentConfig, config_bytes: &[u8], layout: &Layout) -> Result<(Document<AuditResult>, Vec<PathBuf>)> {
    let mut inputs = BTreeMap::from([("config".to_string(), sha256_hex(config_bytes))]);
    let mut written = Vec::new();
    let world = build_world(cfg)?;
    write_world(layout, &world)?;
    inputs.insert("world.json".into(), hash_file(&layout.world())?);
    written.push(layout.world());
    let corpus = build_corpus(cfg, &world)?;
    corpus.write_dir(&layout.corpus())?;
    hash_corpus(layout, &mut inputs)?;
    written.push(layout.corpus());

    let mut success = Vec::new();
    let mut reward_fit = None;
    let (subject, provenance) = match cfg.subject {
        Subject::Trained => {
            let (p, prov) = run_pretrain(cfg, &corpus)?;
            let (p, prov, hash) = save_and_reload(&layout.pretrained(), &p, &prov)?;
            inputs.insert("model.ckpt".into(), hash);
            written.push(layout.pretrained());
            success.extend(success_rows(&p, &world, &corpus, Regime::Pretrained)?);
            match &cfg.finetune {
                Some(spec) => {
                    let (q, qprov, fit) = run_finetune(spec, &world, &corpus, &p, &prov)?;
                    let (q, qprov, hash) = save_and_reload(&layout.finetuned(), &q, &qprov)?;
                    inputs.insert("finetuned.ckpt".into(), hash);
                    written.push(layout.finetuned());
                    success.extend(success_rows(&q, &world, &corpus, Regime::Finetuned)?);
                    reward_fit = Some(fit);
                    (SubjectModel::Trained(q), qprov)
                }
                None => (SubjectModel::Trained(p), prov),
            }
        }
        other => {
            let oracle = build_oracle(other, &world, &corpus)?;
            let prov = oracle.provenance.clone();
            success.extend(success_rows(&oracle, &world, &corpus, prov.regime())?);
            (SubjectModel::Oracle(Box::new(oracle)), prov)
        }
    };
    let (battery, exploitation, matrices) = analyze(cfg, subject.model(), &provenance, &world, &corpus)?;
    written.extend(write_matrices(layout, &matrices)?);
    let warnings = provenance.stages().iter().flat_map(|s| s.warnings.iter().cloned()).collect();
    let doc = Document::new(
        "audit",
        cfg,
        inputs,
        AuditResult { subject: cfg.subject, provenance, reward_fit, success, battery, exploitation, warnings },
    );
    let path = layout.document("report");
    doc.write(&path)?;
    written.push(path);
    Ok((doc, written))
}

/// Read and schema-check `report.json`.
pub fn read_report(path: &Path) -> Result<Document<AuditResult>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(REPORT_SCHEMA) => {}
        other => return Err(Error::Schema(format!("expected {REPORT_SCHEMA}, found {other:?}"))),
    }
    if value.get("command").and_then(|s| s.as_str()) != Some("audit") {
        return Err(Error::Schema("report.json was not written by audit".into()));
    }
    Ok(serde_json::from_value(value)?)
}
