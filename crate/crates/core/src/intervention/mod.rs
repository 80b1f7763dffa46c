// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal interventions on the residual stream: relation-vector addition,
//! probe-guided perturbation, and differential modulation of activation
//! geometry toward or away from a candidate external structure.

mod geometry;
mod modulate;
mod report;
mod vector;

pub use geometry::{classical_mds, procrustes_align, Embedding};
pub use modulate::{
    build_modulation_plan, run_modulated_eval, DeltaSuccess, ManipulationCheck, ModulatedEval, ModulationMode,
    ModulationPlan, RsaShift,
};
pub use report::{
    decide_verdict, exploitation_report, CorrespondenceEntry, DeltaEntry, ExploitationReport, ReportFamily,
    ReportSettings, Rubric, StructureKind, Verdict,
};
pub use vector::{
    apply_vector_addition, country_name_battery, extract_relation_vector, probe_perturb, relation_offset,
    AdditionPrompt, AdditionRow, PerturbDirection, PerturbOutcome, VectorAdditionReport,
};

use serde::{Deserialize, Serialize};

/// Which family an intervention belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterventionKind {
    OffsetAdd,
    ProbePerturb,
    GeometryModulate,
}

/// Where in the prompt a delta is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRule {
    Entity,
    Final,
}

/// Declarative description of one intervention, as recorded in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    pub layer: usize,
    pub position: PositionRule,
    /// Magnitude for offset-add and probe-perturb, strength in [0, 1] for
    /// geometry-modulate.
    pub magnitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<PerturbDirection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<StructureKind>,
    pub seed: u64,
}

impl InterventionSpec {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(crate::error::invalid("magnitude must be finite and non-negative"));
        }
        if self.kind == InterventionKind::GeometryModulate && self.magnitude > 1.0 {
            return Err(crate::error::invalid("modulation strength must lie in [0, 1]"));
        }
        Ok(())
    }
}
