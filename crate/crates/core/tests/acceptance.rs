// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use structcorr::cli::{self, ExperimentConfig, SuccessRow};
use structcorr::corpus::{
    cooccurrence_structure, eval_prompt_set, generate_corpus, Corpus, CorpusConfig,
    PromptFamily, DEFAULT_WINDOW,
};
use structcorr::correspondence::{
    collect_points, permutation_test, rdm, rsa_score, CaptureMeta, DissimilarityMatrix, PointSet, RdmMetric,
};
use structcorr::intervention::{
    apply_vector_addition, build_modulation_plan, country_name_battery, exploitation_report, ModulationMode,
    ReportFamily, ReportSettings, Verdict,
};
use structcorr::model::{next_token_targets, Hooks, LanguageModel, ModelConfig, ModelParams, TrainingProvenance};
use structcorr::oracle::{build_cooccurrence_oracle, build_world_oracle};
use structcorr::success::{statistical_success, truth_success};
use structcorr::world::{generate_world, shift_world, world_dissimilarity, EntityKind, Relation, WorldConfig, WorldStructure};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

struct Trained {
    cfg: ExperimentConfig,
    world: WorldStructure,
    corpus: Corpus,
    params: ModelParams,
    provenance: TrainingProvenance,
}

fn sample_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/sample.json");
    ExperimentConfig::load(&path).expect("sample config").0
}

fn train() -> Result<Trained, Box<dyn std::error::Error>> {
    let cfg = sample_config();
    let world = cli::build_world(&cfg)?;
    let corpus = cli::build_corpus(&cfg, &world)?;
    let (params, provenance) = cli::run_pretrain(&cfg, &corpus)?;
    Ok(Trained { cfg, world, corpus, params, provenance })
}

fn gradient_check() -> Outcome {
    let cfg = ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, context: 8, vocab_size: 13, seed: 4 };
    let mut p = ModelParams::init(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for x in p.data.iter_mut() {
        *x += rng.random_range(-0.3..0.3);
    }
    let toks = [0u32, 5, 9, 3, 12, 7, 5, 2];
    let targets = next_token_targets(&toks);
    let mut grad = vec![0.0; p.n_params()];
    p.loss_and_grad(&toks, &targets, &mut grad)?;
    let step = 1e-4;
    let mut num = vec![0.0; p.n_params()];
    for (i, n) in num.iter_mut().enumerate() {
        let mut plus = p.clone();
        plus.data[i] += step;
        let mut minus = p.clone();
        minus.data[i] -= step;
        *n = (plus.loss(&toks, &targets)? - minus.loss(&toks, &targets)?) / (2.0 * step);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = grad.iter().zip(&num).map(|(a, b)| a - b).collect();
    let rel = norm(&diff) / (norm(&grad) + norm(&num));
    let worst = p
        .layout
        .tensors
        .iter()
        .map(|t| {
            let r = t.offset..t.offset + t.len();
            let d = norm(&diff[r.clone()]);
            let s = norm(&grad[r.clone()]) + norm(&num[r]);
            (if s == 0.0 { 0.0 } else { d / s }, t.name.clone())
        })
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a });
    Ok((
        rel < 1e-4 && worst.0 < 1e-4,
        format!("{} params, relative error {rel:.2e}, worst tensor {} at {:.2e}", p.n_params(), worst.1, worst.0),
    ))
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn point_rdm(vectors: Vec<Vec<f64>>) -> Result<DissimilarityMatrix, structcorr::Error> {
    let labels = (0..vectors.len()).map(|i| format!("e{i}")).collect();
    rdm(&PointSet::new(labels, vectors, CaptureMeta::default())?, RdmMetric::Euclidean)
}

fn rsa_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d) = (16, 5);
    let x = random_points(&mut rng, n, d);
    let dx = point_rdm(x.clone())?;
    let identity = rsa_score(&dx, &dx)?;

    let m = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = m.qr().q();
    let rotated: Vec<Vec<f64>> = x
        .iter()
        .map(|v| (0..d).map(|j| (0..d).map(|k| v[k] * q[(k, j)]).sum()).collect())
        .collect();
    let external = point_rdm(random_points(&mut rng, n, 2))?;
    let shift = (rsa_score(&dx, &external)? - rsa_score(&point_rdm(rotated)?, &external)?).abs();

    let draws = 200;
    let mut p_values = Vec::with_capacity(draws);
    for i in 0..draws {
        let a = point_rdm(random_points(&mut rng, n, 3))?;
        let b = point_rdm(random_points(&mut rng, n, 2))?;
        p_values.push(permutation_test(&a, &b, 499, 1000 + i as u64)?.p_value);
    }
    let mut calibrated = true;
    let mut rates = Vec::new();
    for alpha in [0.05, 0.1, 0.25, 0.5] {
        let rate = p_values.iter().filter(|&&p| p <= alpha).count() as f64 / draws as f64;
        let slack = 3.0 * (alpha * (1.0 - alpha) / draws as f64).sqrt();
        calibrated &= rate <= alpha + slack;
        rates.push(format!("P(p<={alpha})={rate:.3}"));
    }
    Ok((
        identity == 1.0 && shift < 1e-9 && calibrated,
        format!("rsa(D,D)={identity}, |drho| under rotation {shift:.1e}, {}", rates.join(" ")),
    ))
}

fn oracle_verdicts() -> Outcome {
    let mut hits = [0usize; 2];
    let seeds = 10u64;
    for seed in 0..seeds {
        let world = generate_world(100 + seed, &WorldConfig::default())?;
        let corpus = generate_corpus(&world, &CorpusConfig { n_tokens: 30_000, seed, ..CorpusConfig::default() })?;
        let settings = ReportSettings {
            family: ReportFamily::Landmarks,
            layer: 0,
            strengths: vec![1.0],
            bootstrap_resamples: 1000,
            seed,
        };
        let wo = build_world_oracle(&world, &corpus)?;
        let co = build_cooccurrence_oracle(&world, &corpus)?;
        hits[0] += (exploitation_report(&wo, &wo.provenance, &world, &corpus, &settings)?.verdict == Verdict::World) as usize;
        hits[1] += (exploitation_report(&co, &co.provenance, &world, &corpus, &settings)?.verdict == Verdict::Cooccurrence)
            as usize;
    }
    Ok((
        hits == [seeds as usize; 2],
        format!("world oracle -> world {}/{seeds}, co-occurrence oracle -> cooccurrence {}/{seeds}", hits[0], hits[1]),
    ))
}

fn row(rows: &[SuccessRow], family: PromptFamily, diverged_only: bool) -> &SuccessRow {
    rows.iter().find(|r| r.family == family && r.diverged_only == diverged_only).expect("success row")
}

fn regime_reproduction(t: &Trained, rows: &[SuccessRow]) -> Outcome {
    let div = row(rows, PromptFamily::Capital, true);
    let (stat, truth) = (div.metrics.statistical.top1, div.metrics.truth.top1);

    let prompts = eval_prompt_set(&t.world, &t.corpus, PromptFamily::Capital)?.prompts;
    let vocab = &t.corpus.vocab;
    let model: &dyn LanguageModel = &t.params;
    let chosen = prompts
        .iter()
        .find(|p| {
            !p.diverged
                && model.forward_with_trace(&p.tokens, &Hooks::new()).map(|f| f.argmax()).ok()
                    == vocab.id(&p.ground_truth).ok()
        })
        .ok_or("no correctly answered non-diverged country")?;
    let country = t.world.entity_by_name(&chosen.entity)?.id;
    let city = *t.world.non_capital_cities().first().ok_or("no free city")?;
    let shifted = shift_world(&t.world, country, city)?;
    let stat_before = statistical_success(model, vocab, &prompts)?;
    let stat_after = statistical_success(model, vocab, &prompts)?;
    let truth_before = truth_success(model, vocab, &prompts, &t.world)?;
    let truth_after = truth_success(model, vocab, &prompts, &shifted)?;
    let drop = truth_before.top1 - truth_after.top1;
    let unchanged = stat_before == stat_after
        && stat_before.top1.to_bits() == stat_after.top1.to_bits()
        && stat_before.mean_log_prob.to_bits() == stat_after.mean_log_prob.to_bits();
    let one_prompt = truth_before.hits == truth_after.hits + 1 && (drop - 1.0 / prompts.len() as f64).abs() < 1e-15;
    Ok((
        stat >= 0.8 && truth <= 0.2 && unchanged && one_prompt,
        format!(
            "diverged capitals (n={}): statistical {stat:.3}, truth {truth:.3}; shifting {} moves truth by -{drop:.4} (1/{}), statistical bit-identical: {unchanged}",
            div.metrics.truth.n,
            chosen.entity,
            prompts.len()
        ),
    ))
}

fn finetune_reproduction(t: &Trained, before: &[SuccessRow]) -> Outcome {
    let spec = t.cfg.finetune.as_ref().ok_or("sample config has no finetune section")?;
    let (q, _, fit) = cli::run_finetune(spec, &t.world, &t.corpus, &t.params, &t.provenance)?;
    let after = cli::success_rows(&q, &t.world, &t.corpus, structcorr::model::Regime::Finetuned)?;
    let b = row(before, PromptFamily::Capital, true).metrics.truth.top1;
    let a = row(&after, PromptFamily::Capital, true).metrics.truth.top1;
    Ok((
        a - b >= 0.4,
        format!("diverged capital truth {b:.3} -> {a:.3} (+{:.3}); reward accuracy {:.3}", a - b, fit.accuracy),
    ))
}

fn correspondence_emergence(t: &Trained) -> Outcome {
    let mut cfg = t.cfg.clone();
    cfg.analysis.n_perm = 999;
    let (rsa, _) = cli::rsa_battery(&cfg, &t.params, &t.world, &t.corpus)?;
    let (_, ordering) = cli::probe_battery(&cfg, &t.params, &t.world, &t.corpus)?;
    let best = |family: ReportFamily| {
        rsa.iter()
            .filter(|r| r.family == family && r.structure == structcorr::intervention::StructureKind::World)
            .min_by(|a, b| a.p_value.total_cmp(&b.p_value))
            .cloned()
    };
    let land = best(ReportFamily::Landmarks).ok_or("no landmark rows")?;
    let color = best(ReportFamily::Colors).ok_or("no color rows")?;
    let order = ordering
        .iter()
        .max_by(|a, b| (a.observed.abs() - a.null_95).total_cmp(&(b.observed.abs() - b.null_95)))
        .ok_or("no ordering rows")?;
    Ok((
        land.p_value < 0.05 && color.p_value < 0.05 && order.observed.abs() > order.null_95,
        format!(
            "landmarks L{} rsa {:.3} p {:.3}; colors L{} rsa {:.3} p {:.3}; year ordering L{} |rho| {:.3} vs null95 {:.3}",
            land.layer,
            land.observed,
            land.p_value,
            color.layer,
            color.observed,
            color.p_value,
            order.layer,
            order.observed.abs(),
            order.null_95
        ),
    ))
}

fn manipulation_checks(t: &Trained) -> Outcome {
    let ids = t.world.entities_of_kind(EntityKind::Landmark);
    let names = t.world.names(&ids)?;
    let world = world_dissimilarity(&t.world, &ids, Relation::Position)?;
    let cooc = cooccurrence_structure(&t.corpus, &names, DEFAULT_WINDOW)?.dissimilarity;
    let points = collect_points(&t.params, &t.corpus.vocab, &names, "{}", 0)?;
    let mut ok = true;
    let mut notes = Vec::new();
    for (label, target, competitor) in [("world", &world, &cooc), ("cooccurrence", &cooc, &world)] {
        let null95 = permutation_test(target, target, 999, 9)?.null_percentile(95.0);
        let tighten = build_modulation_plan(&points, target, Some(competitor), 1.0, ModulationMode::Tighten, 1)?;
        let loosen = build_modulation_plan(&points, target, Some(competitor), 1.0, ModulationMode::Loosen, 2)?;
        let tc = tighten.check.ok_or("tighten plan has no check")?;
        let lc = loosen.check.ok_or("loosen plan has no check")?;
        let comp = lc.readout_competitor.ok_or("loosen check has no competitor")?;
        let target_move = (lc.readout_target.after - lc.readout_target.before).abs();
        let comp_move = (comp.after - comp.before).abs();
        let pass = tc.readout_target.after >= 0.99 && lc.readout_target.after < null95 && comp_move < 0.5 * target_move;
        ok &= pass;
        notes.push(format!(
            "{label}: tighten {:.4}, loosen {:.3} (null95 {null95:.3}), competitor moved {comp_move:.3} vs target {target_move:.3}; full space tighten {:.3} loosen {:.3}",
            tc.readout_target.after, lc.readout_target.after, tc.full_target.after, lc.full_target.after
        ));
    }
    Ok((ok, format!("landmarks at layer 0 readout space; {}", notes.join("; "))))
}

fn vector_battery(t: &Trained) -> Outcome {
    let countries = t.world.names(&t.world.entities_of_kind(EntityKind::Country))?;
    let prompts = country_name_battery(&t.world, &t.corpus.vocab, &countries)?;
    let d = t.params.shape().d_model;
    let zero = apply_vector_addition(&t.params, &t.corpus.vocab, &prompts, 0, &vec![0.0; d])?;
    let mut exact = zero.rows.iter().all(|r| !r.changed && r.delta_rr == 0.0);
    for p in &prompts {
        let plain = t.params.forward_with_trace(&p.tokens, &Hooks::new())?;
        let hooked = t.params.forward_with_trace(&p.tokens, &Hooks::new().with(0, p.tokens.len() - 1, &vec![0.0; d])?)?;
        exact &= plain == hooked;
    }
    let result = cli::intervention_battery(&t.cfg, &t.params, &t.world, &t.corpus)?;
    let v = &result.vector_addition.report;
    println!("  vector addition at layer {} (|v| = {:.3}); reference flip rate 0.37", v.layer, v.vector_norm);
    println!("  {:<10} {:<10} {:<10} {:<10} {:>8}", "entity", "target", "before", "after", "dRR");
    for r in &v.rows {
        println!("  {:<10} {:<10} {:<10} {:<10} {:>+8.3}", r.entity, r.target, r.baseline, r.output, r.delta_rr);
    }
    Ok((
        exact && !v.rows.is_empty(),
        format!(
            "zero vector bit-exact: {exact}; flip rate {:.3}, target rate {:.3}, mean dRR {:+.3}",
            v.flip_rate, v.target_rate, v.mean_delta_rr
        ),
    ))
}

fn determinism() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.json");
    let mut reports = Vec::new();
    let dir = tempfile::tempdir()?;
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let args = ["structcorr", "audit", "--threads", "1", "--config"];
        let parsed = <cli::Cli as clap::Parser>::try_parse_from(
            args.iter().map(Into::into).chain([config.clone().into_os_string(), "--out".into(), out.clone().into_os_string()]),
        )?;
        cli::execute(&parsed)?;
        reports.push(std::fs::read(out.join("report.json"))?);
    }
    Ok((
        reports[0] == reports[1],
        format!("two audits of configs/small.json: {} and {} bytes, identical: {}", reports[0].len(), reports[1].len(), reports[0] == reports[1]),
    ))
}

fn report(n: usize, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let took = start.elapsed();
    let (pass, detail) = match outcome {
        Ok((pass, detail)) => (pass && took <= limit, detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "{} criterion {n}: {detail} [{:.1}s, limit {}s]",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn main() {
    let min = |m: u64| Duration::from_secs(60 * m);
    let mut results = vec![report(1, min(1), gradient_check), report(2, min(5), rsa_identities), report(3, min(10), oracle_verdicts)];

    let start = Instant::now();
    let trained = train();
    let train_time = start.elapsed();
    println!("  pre-training the sample config took {:.1}s", train_time.as_secs_f64());
    match trained {
        Ok(t) => {
            let rows = cli::success_rows(&t.params, &t.world, &t.corpus, t.provenance.regime());
            match rows {
                Ok(rows) => {
                    results.push(report(4, min(30).saturating_sub(train_time), || regime_reproduction(&t, &rows)));
                    results.push(report(5, min(30), || finetune_reproduction(&t, &rows)));
                }
                Err(e) => {
                    for n in [4, 5] {
                        println!("FAIL criterion {n}: error: {e}");
                        results.push(false);
                    }
                }
            }
            results.push(report(6, min(30), || correspondence_emergence(&t)));
            results.push(report(7, min(10), || manipulation_checks(&t)));
            results.push(report(8, min(10), || vector_battery(&t)));
        }
        Err(e) => {
            for n in 4..=8 {
                println!("FAIL criterion {n}: pre-training failed: {e}");
                results.push(false);
            }
        }
    }
    results.push(report(9, min(30), determinism));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
