// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end. Each subcommand reads an experiment config,
//! reads the artifacts earlier subcommands left in the output directory and
//! writes its own JSON document there.

mod config;
mod pipeline;
mod render;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{invalid, Error, Result};
use crate::model::{checkpoint, Regime};

pub use config::{AnalysisPlan, ExperimentConfig, FinetuneSpec, ModelSpec, Subject, WorldSpec, CONFIG_SCHEMA};
pub use pipeline::{
    analogy_battery, analyze, audit, build_corpus, build_oracle, build_world, exploitation_battery,
    intervention_battery, load_subject, modulation_battery, probe_battery, read_report, rsa_battery, run_finetune,
    run_pretrain, sha256_hex, success_rows, AnalogyRow, AuditResult, Battery, Document,
    InterventionResult, Layout, ModulationRow, OrderingRow, PerturbBattery, ProbeRow, RsaRow, SuccessRow,
    VectorBattery, REPORT_SCHEMA, YEAR_TEMPLATE,
};
pub use render::{dependence_csv, summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Debug, Parser)]
#[command(name = "structcorr", version, about = "Audit which structure a toy language model exploits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace every seed in the config with one derived from N.
    #[arg(long, global = true, value_name = "N")]
    pub seed_override: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the world (world.json).
    GenWorld,
    /// Render the corpus (corpus/).
    GenCorpus,
    /// Pre-train the model (model.ckpt, train.json).
    Train,
    /// Reward-model fine-tuning (finetuned.ckpt, finetune.json).
    Finetune,
    /// Attribute probes and the year ordering (probe.json).
    Probe,
    /// RSA against world and co-occurrence structure (rsa.json, rdm/).
    Rsa,
    /// Country-capital offset consistency (analogy.json).
    Analogy,
    /// Vector addition and probe perturbation (intervene.json).
    Intervene,
    /// Modulation plans and their manipulation checks (modulate.json).
    Modulate,
    /// Full pipeline (everything above plus report.json).
    Audit,
    /// Print report.json.
    Report {
        /// Plain-text tables regardless of --format.
        #[arg(long)]
        summary: bool,
    },
}

/// What a command leaves for stdout.
enum Output {
    Wrote(Vec<PathBuf>),
    Text(String),
}

struct Context {
    cfg: ExperimentConfig,
    config_bytes: Vec<u8>,
    layout: Layout,
}

fn context(cli: &Cli) -> Result<Context> {
    let path = cli.config.as_ref().ok_or_else(|| invalid("--config is required"))?;
    let (mut cfg, config_bytes) = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed_override {
        cfg = cfg.with_seed_override(seed);
    }
    let layout = Layout::new(cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone()));
    Ok(Context { cfg, config_bytes, layout })
}

fn config_input(ctx: &Context) -> BTreeMap<String, String> {
    BTreeMap::from([("config".to_string(), sha256_hex(&ctx.config_bytes))])
}

fn dispatch(cli: &Cli) -> Result<Output> {
    if let Command::Report { summary: as_text } = cli.command {
        let out = match (&cli.out, &cli.config) {
            (Some(o), _) => o.clone(),
            (None, Some(_)) => context(cli)?.layout.root().to_path_buf(),
            (None, None) => return Err(invalid("report needs --out or --config")),
        };
        let doc = read_report(&Layout::new(out).document("report"))?;
        let format = if as_text { Format::Text } else { cli.format };
        return Ok(Output::Text(match format {
            Format::Json => serde_json::to_string_pretty(&doc)? + "\n",
            Format::Csv => dependence_csv(&doc)?,
            Format::Text => summary(&doc),
        }));
    }
    let ctx = context(cli)?;
    let (cfg, layout) = (&ctx.cfg, &ctx.layout);
    let mut inputs = config_input(&ctx);
    let written = match cli.command {
        Command::GenWorld => {
            pipeline::write_world(layout, &pipeline::build_world(cfg)?)?;
            vec![layout.world()]
        }
        Command::GenCorpus => {
            let world = pipeline::read_world(layout, &mut inputs)?;
            pipeline::build_corpus(cfg, &world)?.write_dir(&layout.corpus())?;
            vec![layout.corpus()]
        }
        Command::Train => {
            let world = pipeline::read_world(layout, &mut inputs)?;
            let corpus = pipeline::read_corpus(layout, &world, &mut inputs)?;
            let (p, prov) = pipeline::run_pretrain(cfg, &corpus)?;
            checkpoint::save(&layout.pretrained(), &p, &prov)?;
            let (p, prov) = checkpoint::load(&layout.pretrained())?;
            let rows = success_rows(&p, &world, &corpus, Regime::Pretrained)?;
            let path = layout.document("train");
            Document::new("train", cfg, inputs, TrainResult { provenance: prov, success: rows }).write(&path)?;
            vec![layout.pretrained(), path]
        }
        Command::Finetune => {
            let spec = cfg.finetune.as_ref().ok_or_else(|| invalid("config has no finetune section"))?;
            let world = pipeline::read_world(layout, &mut inputs)?;
            let corpus = pipeline::read_corpus(layout, &world, &mut inputs)?;
            inputs.insert("model.ckpt".into(), pipeline::hash_file(&layout.pretrained())?);
            let (p, prov) = checkpoint::load(&layout.pretrained())?;
            let (q, qprov, fit) = pipeline::run_finetune(spec, &world, &corpus, &p, &prov)?;
            checkpoint::save(&layout.finetuned(), &q, &qprov)?;
            let (q, qprov) = checkpoint::load(&layout.finetuned())?;
            let mut rows = success_rows(&p, &world, &corpus, Regime::Pretrained)?;
            rows.extend(success_rows(&q, &world, &corpus, Regime::Finetuned)?);
            let path = layout.document("finetune");
            let result = FinetuneResult { reward_fit: fit, provenance: qprov, success: rows };
            Document::new("finetune", cfg, inputs, result).write(&path)?;
            vec![layout.finetuned(), path]
        }
        Command::Probe | Command::Rsa | Command::Analogy | Command::Intervene | Command::Modulate => {
            let world = pipeline::read_world(layout, &mut inputs)?;
            let corpus = pipeline::read_corpus(layout, &world, &mut inputs)?;
            let (subject, _) = pipeline::load_subject(cfg, layout, &world, &corpus, &mut inputs)?;
            let model = subject.model();
            let name = match cli.command {
                Command::Probe => "probe",
                Command::Rsa => "rsa",
                Command::Analogy => "analogy",
                Command::Intervene => "intervene",
                _ => "modulate",
            };
            let path = layout.document(name);
            let mut written = Vec::new();
            match cli.command {
                Command::Probe => {
                    let (probes, ordering) = pipeline::probe_battery(cfg, model, &world, &corpus)?;
                    Document::new(name, cfg, inputs, ProbeResult { probes, ordering }).write(&path)?;
                }
                Command::Rsa => {
                    let (rows, matrices) = pipeline::rsa_battery(cfg, model, &world, &corpus)?;
                    written = pipeline::write_matrices(layout, &matrices)?;
                    Document::new(name, cfg, inputs, rows).write(&path)?;
                }
                Command::Analogy => {
                    let rows = pipeline::analogy_battery(cfg, model, &world, &corpus)?;
                    Document::new(name, cfg, inputs, rows).write(&path)?;
                }
                Command::Intervene => {
                    let result = pipeline::intervention_battery(cfg, model, &world, &corpus)?;
                    Document::new(name, cfg, inputs, result).write(&path)?;
                }
                _ => {
                    let rows = pipeline::modulation_battery(cfg, model, &world, &corpus)?;
                    Document::new(name, cfg, inputs, rows).write(&path)?;
                }
            }
            written.push(path);
            written
        }
        Command::Audit => audit(cfg, &ctx.config_bytes, layout)?.1,
        Command::Report { .. } => unreachable!("handled above"),
    };
    Ok(Output::Wrote(written))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainResult {
    pub provenance: crate::model::TrainingProvenance,
    pub success: Vec<SuccessRow>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FinetuneResult {
    pub reward_fit: crate::model::RewardFit,
    pub provenance: crate::model::TrainingProvenance,
    pub success: Vec<SuccessRow>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbeResult {
    pub probes: Vec<ProbeRow>,
    pub ordering: Vec<OrderingRow>,
}

/// Run a parsed command inside a pool of the requested size.
pub fn execute(cli: &Cli) -> Result<String> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| invalid(format!("thread pool: {e}")))?;
    let output = pool.install(|| dispatch(cli))?;
    Ok(match output {
        Output::Text(t) => t,
        Output::Wrote(paths) => match cli.format {
            Format::Json => {
                let wrote: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
                serde_json::to_string_pretty(&serde_json::json!({ "command": command_name(&cli.command), "wrote": wrote }))?
                    + "\n"
            }
            Format::Csv => std::iter::once("path".to_string())
                .chain(paths.iter().map(|p| p.display().to_string()))
                .map(|l| l + "\n")
                .collect(),
            Format::Text => paths.iter().map(|p| format!("wrote {}\n", p.display())).collect(),
        },
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenWorld => "gen-world",
        Command::GenCorpus => "gen-corpus",
        Command::Train => "train",
        Command::Finetune => "finetune",
        Command::Probe => "probe",
        Command::Rsa => "rsa",
        Command::Analogy => "analogy",
        Command::Intervene => "intervene",
        Command::Modulate => "modulate",
        Command::Audit => "audit",
        Command::Report { .. } => "report",
    }
}

/// Machine-readable error document.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() }).to_string()
}

/// Parse `args`, run, print, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = invalid(e.to_string());
            eprintln!("{}", error_json(&err));
            return err.exit_code();
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            e.exit_code()
        }
    }
}
