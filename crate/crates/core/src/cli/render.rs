// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use crate::error::Result;
use crate::intervention::{ModulationMode, StructureKind};

use super::pipeline::{family_label, AuditResult, Document};

fn target_label(t: StructureKind) -> &'static str {
    match t {
        StructureKind::World => "world",
        StructureKind::Cooccurrence => "cooccurrence",
    }
}

/// Plain-text tables of an audit report.
pub fn summary(doc: &Document<AuditResult>) -> String {
    let r = &doc.result;
    let mut s = String::new();
    let regime = r.provenance.regime();
    let _ = writeln!(s, "subject   {:?} ({regime:?})", r.subject);
    let _ = writeln!(s, "task      {}", r.provenance.task_description());
    for w in &r.warnings {
        let _ = writeln!(s, "warning   {w}");
    }

    let _ = writeln!(s, "\nsuccess");
    let _ = writeln!(s, "  {:<11} {:<9} {:<9} {:>11} {:>7} {:>4}", "regime", "family", "subset", "statistical", "truth", "n");
    for row in &r.success {
        let _ = writeln!(
            s,
            "  {:<11} {:<9} {:<9} {:>11.3} {:>7.3} {:>4}",
            format!("{:?}", row.regime).to_lowercase(),
            format!("{:?}", row.family).to_lowercase(),
            if row.diverged_only { "diverged" } else { "all" },
            row.metrics.statistical.top1,
            row.metrics.truth.top1,
            row.metrics.truth.n,
        );
    }

    let _ = writeln!(s, "\ncorrespondence (RSA, entity permutation null)");
    let _ = writeln!(s, "  {:>5} {:<9} {:<12} {:>7} {:>7} {:>7}", "layer", "family", "structure", "rsa", "null95", "p");
    for row in &r.battery.rsa {
        let _ = writeln!(
            s,
            "  {:>5} {:<9} {:<12} {:>7.3} {:>7.3} {:>7.3}",
            row.layer,
            family_label(row.family),
            target_label(row.structure),
            row.observed,
            row.null_95,
            row.p_value
        );
    }
    for row in &r.battery.ordering {
        let _ = writeln!(
            s,
            "  year ordering at layer {} final position: rho {:.3}, null95 {:.3}, p {:.3}",
            row.layer, row.observed, row.null_95, row.p_value
        );
    }

    let _ = writeln!(s, "\nexploitation (loosen at the largest strength, regime metric)");
    let _ = writeln!(s, "  {:>5} {:<9} {:<12} {:>24} {:>24}", "layer", "family", "verdict", "world delta [CI]", "cooc delta [CI]");
    for rep in &r.exploitation {
        let max = rep.rubric.success_dependence.iter().map(|d| d.strength).fold(0.0, f64::max);
        let cell = |t: StructureKind| {
            rep.rubric
                .success_dependence
                .iter()
                .find(|d| d.target == t && d.mode == ModulationMode::Loosen && d.strength == max)
                .map_or("-".to_string(), |d| format!("{:+.3} [{:+.3}, {:+.3}]", d.delta, d.ci_low, d.ci_high))
        };
        let _ = writeln!(
            s,
            "  {:>5} {:<9} {:<12} {:>24} {:>24}",
            rep.layer,
            family_label(rep.family),
            format!("{:?}", rep.verdict).to_lowercase(),
            cell(StructureKind::World),
            cell(StructureKind::Cooccurrence)
        );
    }

    let v = &r.battery.interventions.vector_addition.report;
    let _ = writeln!(s, "\nvector addition at layer {} (|v| = {:.3})", v.layer, v.vector_norm);
    let _ = writeln!(s, "  {:<10} {:<10} {:<10} {:<10} {:>8}", "entity", "target", "before", "after", "dRR");
    for row in &v.rows {
        let _ = writeln!(
            s,
            "  {:<10} {:<10} {:<10} {:<10} {:>+8.3}",
            row.entity, row.target, row.baseline, row.output, row.delta_rr
        );
    }
    let _ = writeln!(
        s,
        "  flip rate {:.3}, target rate {:.3}, mean dRR {:+.3}",
        v.flip_rate, v.target_rate, v.mean_delta_rr
    );
    s
}

/// One CSV row per success-dependence entry of every exploitation report.
pub fn dependence_csv(doc: &Document<AuditResult>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "family", "target", "mode", "strength", "metric", "delta", "ci_low", "ci_high"])?;
    for rep in &doc.result.exploitation {
        for d in &rep.rubric.success_dependence {
            w.write_record([
                rep.layer.to_string(),
                family_label(rep.family).to_string(),
                target_label(d.target).to_string(),
                format!("{:?}", d.mode).to_lowercase(),
                d.strength.to_string(),
                format!("{:?}", d.metric).to_lowercase(),
                d.delta.to_string(),
                d.ci_low.to_string(),
                d.ci_high.to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
