// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use structcorr::cli::{read_report, AuditResult, Document, ExperimentConfig, REPORT_SCHEMA};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_structcorr"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not an error document ({e}): {text}"))
}

/// One audit of the small config, shared by the report tests.
fn audited() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = bin()
            .args(["audit", "--threads", "1", "--config"])
            .arg(config("small.json"))
            .arg("--out")
            .arg(dir.path())
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    })
    .path()
}

#[test]
fn missing_config_file_exits_3() {
    let out = bin().args(["gen-world", "--config", "/nonexistent/config.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "missing_artifact");
}

#[test]
fn wrong_schema_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = fs::read_to_string(config("small.json")).unwrap().replace("structcorr.experiment/v1", "other/v9");
    fs::write(&path, text).unwrap();
    let out = bin().arg("gen-world").arg("--config").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "schema");
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("extra.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(config("small.json")).unwrap()).unwrap();
    v["surprise"] = serde_json::json!(1);
    fs::write(&path, v.to_string()).unwrap();
    let out = bin().arg("gen-world").arg("--config").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("train").arg("--config").arg(config("small.json")).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("world.json"));
}

#[test]
fn bad_arguments_exit_1_with_an_error_document() {
    let out = bin().args(["audit", "--threads", "lots"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "invalid_argument");
    let out = bin().args(["audit", "--threads", "0", "--config"]).arg(config("small.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("audit"));
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let run = |cmd: &str| {
        let out = bin().arg(cmd).arg("--config").arg(config("small.json")).arg("--out").arg(dir.path()).output().unwrap();
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap()
    };
    assert_eq!(run("gen-world")["command"], "gen-world");
    run("gen-corpus");
    run("train");
    run("finetune");
    let rsa = run("rsa");
    assert!(rsa["wrote"].as_array().unwrap().iter().any(|p| p.as_str().unwrap().ends_with(".csv")));
    for cmd in ["probe", "analogy", "intervene", "modulate"] {
        run(cmd);
        let doc: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(format!("{cmd}.json"))).unwrap()).unwrap();
        assert_eq!(doc["command"], cmd);
        assert!(doc["inputs"]["finetuned.ckpt"].is_string());
    }
}

#[test]
fn audit_report_matches_the_published_schema() {
    let text = fs::read_to_string(audited().join("report.json")).unwrap();
    let doc: Document<AuditResult> = serde_json::from_str(&text).unwrap();
    assert_eq!(doc.schema, REPORT_SCHEMA);
    assert_eq!(doc.command, "audit");
    let cfg = ExperimentConfig::from_json(&fs::read_to_string(config("small.json")).unwrap()).unwrap();
    assert_eq!(doc.config, cfg);
    let r = &doc.result;
    assert_eq!(r.exploitation.len(), cfg.analysis.layers.len() * cfg.analysis.families.len());
    assert!(r.reward_fit.is_some());
    assert_eq!(serde_json::to_string_pretty(&doc).unwrap() + "\n", text);
    assert_eq!(read_report(&audited().join("report.json")).unwrap(), doc);
}

#[test]
fn report_renders_every_format() {
    let report = |extra: &[&str]| {
        let out = bin().arg("report").arg("--out").arg(audited()).args(extra).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let json: serde_json::Value = serde_json::from_str(&report(&[])).unwrap();
    assert_eq!(json["schema"], REPORT_SCHEMA);
    let csv = report(&["--format", "csv"]);
    assert!(csv.starts_with("layer,family,target,mode,strength,metric,delta,ci_low,ci_high\n"));
    assert!(csv.lines().count() > 1);
    let text = report(&["--summary"]);
    for heading in ["success", "correspondence", "exploitation", "vector addition"] {
        assert!(text.contains(heading), "missing {heading}");
    }
}

#[test]
fn seed_override_changes_the_world() {
    let dir = tempfile::tempdir().unwrap();
    let world = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        let run = bin()
            .args(["gen-world", "--seed-override", seed, "--config"])
            .arg(config("small.json"))
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(run.status.success());
        fs::read(out.join("world.json")).unwrap()
    };
    assert_eq!(world("5", "a"), world("5", "b"));
    assert_ne!(world("5", "a"), world("6", "c"));
}
