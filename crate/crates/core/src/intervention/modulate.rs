// SPDX-License-Identifier: MIT OR Apache-2.0

//! Differential modulation of a point set's geometry.
//!
//! The target structure is embedded by classical MDS and read out of the
//! centred points by a ridge map `B_T`. The plan moves each point so that
//! its readout becomes the Procrustes-aligned MDS configuration (tighten) or
//! that configuration under a derangement of entities (loosen), using the
//! minimum-norm delta that also leaves a ridge readout `B_C` of the competing
//! structure untouched.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Prompt, Vocab};
use crate::correspondence::{rdm_of_vectors, rsa_score, CaptureMeta, DissimilarityMatrix, PointSet, RdmMetric};
use crate::error::{invalid, Error, Result};
use crate::linalg::{center_columns, loo_ridge_lambda, pinv, rank, ridge, to_matrix, to_rows};
use crate::model::{Hooks, LanguageModel};
use crate::stats::{bootstrap_mean_ci, derive_seed, random_derangement};
use crate::success::{prompt_outcome, MetricId, SuccessMetric};
use crate::world::WorldStructure;

use super::geometry::{mds_matrix, procrustes_matrix};

/// Derangements drawn when loosening; the one least correlated with the
/// target is kept.
const DERANGEMENT_DRAWS: usize = 32;
const RANK_TOL: f64 = 1e-9;
/// Ridge strengths tried for each readout, as powers of ten times the mean
/// squared row norm.
const RIDGE_EXPONENTS: std::ops::RangeInclusive<i32> = -8..=2;
const CHECK_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationMode {
    Tighten,
    Loosen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsaShift {
    pub before: f64,
    pub after: f64,
}

impl RsaShift {
    pub fn change(&self) -> f64 {
        self.after - self.before
    }
}

/// RSA to the target and to the competing structure before and after the
/// plan. Readout values are computed on the linear readouts the plan edits
/// and gate the plan; full values use whole activation vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationCheck {
    pub readout_target: RsaShift,
    pub readout_competitor: Option<RsaShift>,
    pub full_target: RsaShift,
    pub full_competitor: Option<RsaShift>,
    /// Readout dimensions given to the target.
    pub target_dims: usize,
    /// Readout dimensions of the competitor held fixed.
    pub pinned_dims: usize,
    /// Ridge strengths picked by leave-one-out error.
    pub ridge_target: f64,
    pub ridge_competitor: Option<f64>,
}

/// Per-entity deltas at one layer, applied at each prompt's entity token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationPlan {
    pub meta: CaptureMeta,
    pub mode: ModulationMode,
    pub strength: f64,
    pub seed: u64,
    pub entities: Vec<String>,
    pub deltas: Vec<Vec<f64>>,
    /// Entity `i` is sent to the aligned target of `derangement[i]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derangement: Option<Vec<usize>>,
    pub check: Option<ManipulationCheck>,
}

impl ModulationPlan {
    pub fn layer(&self) -> usize {
        self.meta.layer
    }

    pub fn delta_for(&self, entity: &str) -> Option<&[f64]> {
        self.entities.iter().position(|e| e == entity).map(|i| self.deltas[i].as_slice())
    }

    /// The plan that undoes this one.
    pub fn inverse(&self) -> Self {
        let mut p = self.clone();
        p.deltas.iter_mut().flatten().for_each(|x| *x = -*x);
        p
    }
}

fn check_labels(points: &PointSet, d: &DissimilarityMatrix, what: &str) -> Result<()> {
    if d.labels() != points.entities.as_slice() {
        return Err(Error::ShapeMismatch(format!("{what} structure is not over the point set's entities")));
    }
    Ok(())
}

fn rsa_of_rows(labels: &[String], m: &DMatrix<f64>, d: &DissimilarityMatrix) -> Result<f64> {
    rsa_score(&rdm_of_vectors(labels.to_vec(), &to_rows(m), RdmMetric::Euclidean)?, d)
}

fn least_correlated_derangement(target: &DissimilarityMatrix, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..DERANGEMENT_DRAWS {
        let p = random_derangement(target.n(), &mut rng)?;
        let r = rsa_score(&target.permuted(&p), target)?;
        if best.as_ref().is_none_or(|(b, _)| r < *b) {
            best = Some((r, p));
        }
    }
    Ok(best.expect("at least one draw").1)
}

fn readout(xc: &DMatrix<f64>, coords: &DMatrix<f64>, scale: f64) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let grid: Vec<f64> = RIDGE_EXPONENTS.map(|e| scale * 10f64.powi(e)).collect();
    let lambda = loo_ridge_lambda(xc, coords, &grid);
    let (b, bias) = ridge(xc, coords, lambda)?;
    let mut y = xc * &b;
    for mut row in y.row_iter_mut() {
        row += bias.transpose();
    }
    Ok((b, y, lambda))
}

/// Build a plan moving `points` toward (or away from) `target` by
/// `strength`, holding the readout of `competitor` fixed.
///
/// Errors with `ManipulationCheck` when the resulting readout RSA moves the
/// wrong way.
pub fn build_modulation_plan(
    points: &PointSet,
    target: &DissimilarityMatrix,
    competitor: Option<&DissimilarityMatrix>,
    strength: f64,
    mode: ModulationMode,
    seed: u64,
) -> Result<ModulationPlan> {
    let n = points.len();
    if n < 4 {
        return Err(invalid(format!("modulation needs at least 4 entities, got {n}")));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(invalid(format!("strength {strength} outside [0, 1]")));
    }
    check_labels(points, target, "target")?;
    if let Some(c) = competitor {
        check_labels(points, c, "competing")?;
    }
    let d = points.width();
    let x = to_matrix(&points.vectors);
    let (xc, _) = center_columns(&x);
    let r = rank(&xc, RANK_TOL);
    let scale = (xc.norm_squared() / n as f64).max(f64::MIN_POSITIVE);

    let (comp_coords, pinned) = match competitor {
        Some(c) => {
            let (m, _, avail) = mds_matrix(c, n - 1);
            let k = avail.min(r / 2);
            (Some(m.columns(0, k).into_owned()), k)
        }
        None => (None, 0),
    };
    let (mt, _, avail_t) = mds_matrix(target, n - 1);
    let k_t = avail_t.min(n - 1).min(d).min(r.saturating_sub(pinned));
    if k_t == 0 {
        return Err(Error::Infeasible("points leave no room to read out the target structure".into()));
    }
    let mt = mt.columns(0, k_t).into_owned();
    let (bt, yt, ridge_target) = readout(&xc, &mt, scale)?;
    let aligned = procrustes_matrix(&mt, &yt)?;
    let derangement = match mode {
        ModulationMode::Tighten => None,
        ModulationMode::Loosen => Some(least_correlated_derangement(target, seed)?),
    };
    let desired = match &derangement {
        None => aligned,
        Some(p) => DMatrix::from_fn(n, k_t, |i, j| aligned[(p[i], j)]),
    };

    let (bc, yc, ridge_competitor) = match &comp_coords {
        Some(m) if pinned > 0 => {
            let (b, y, l) = readout(&xc, m, scale)?;
            (Some(b), Some(y), Some(l))
        }
        _ => (None, None, None),
    };
    let delta = if strength == 0.0 {
        DMatrix::zeros(n, d)
    } else {
        let k = k_t + pinned;
        let mut basis = DMatrix::zeros(d, k);
        basis.columns_mut(0, k_t).copy_from(&bt);
        if let Some(b) = &bc {
            basis.columns_mut(k_t, pinned).copy_from(b);
        }
        let mut rhs = DMatrix::zeros(n, k);
        rhs.columns_mut(0, k_t).copy_from(&((&desired - &yt) * strength));
        rhs * pinv(&basis, RANK_TOL)
    };

    let labels = &points.entities;
    let moved = &x + &delta;
    let readout_target = RsaShift {
        before: rsa_of_rows(labels, &yt, target)?,
        after: rsa_of_rows(labels, &(&yt + &delta * &bt), target)?,
    };
    let readout_competitor = match (competitor, &bc, &yc) {
        (Some(c), Some(b), Some(y)) => Some(RsaShift {
            before: rsa_of_rows(labels, y, c)?,
            after: rsa_of_rows(labels, &(y + &delta * b), c)?,
        }),
        _ => None,
    };
    let full_target = RsaShift { before: rsa_of_rows(labels, &x, target)?, after: rsa_of_rows(labels, &moved, target)? };
    let full_competitor = match competitor {
        Some(c) => Some(RsaShift { before: rsa_of_rows(labels, &x, c)?, after: rsa_of_rows(labels, &moved, c)? }),
        None => None,
    };
    let wrong_way = match mode {
        ModulationMode::Tighten => readout_target.after < readout_target.before - CHECK_SLACK,
        ModulationMode::Loosen => readout_target.after > readout_target.before + CHECK_SLACK,
    };
    if wrong_way {
        return Err(Error::ManipulationCheck(format!(
            "{mode:?} at strength {strength} moved target RSA from {:.4} to {:.4}",
            readout_target.before, readout_target.after
        )));
    }
    Ok(ModulationPlan {
        meta: points.meta.clone(),
        mode,
        strength,
        seed,
        entities: labels.clone(),
        deltas: to_rows(&delta),
        derangement,
        check: Some(ManipulationCheck {
            readout_target,
            readout_competitor,
            full_target,
            full_competitor,
            target_dims: k_t,
            pinned_dims: pinned,
            ridge_target,
            ridge_competitor,
        }),
    })
}

/// Mean change of one metric with its paired bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSuccess {
    pub metric: MetricId,
    pub baseline: f64,
    pub modulated: f64,
    pub delta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulatedEval {
    /// Under the metric the caller asked for.
    pub primary: DeltaSuccess,
    /// Under the other metric, for contrast.
    pub contrast: DeltaSuccess,
    pub n_prompts: usize,
    /// Entities of prompts that ran unmodulated because the plan has no
    /// delta for them.
    pub unmodulated: Vec<String>,
}

fn delta_success(metric: MetricId, base: &[f64], modded: &[f64], resamples: usize, seed: u64) -> DeltaSuccess {
    let diffs: Vec<f64> = modded.iter().zip(base).map(|(m, b)| m - b).collect();
    let n = diffs.len().max(1) as f64;
    let (ci_low, ci_high) = bootstrap_mean_ci(&diffs, resamples, 0.95, seed);
    DeltaSuccess {
        metric,
        baseline: base.iter().sum::<f64>() / n,
        modulated: modded.iter().sum::<f64>() / n,
        delta: diffs.iter().sum::<f64>() / n,
        ci_low,
        ci_high,
    }
}

/// Run every prompt with and without the plan's delta at its entity token.
#[allow(clippy::too_many_arguments)]
pub fn run_modulated_eval(
    model: &dyn LanguageModel,
    vocab: &Vocab,
    world: &WorldStructure,
    plan: &ModulationPlan,
    prompts: &[Prompt],
    metric: &SuccessMetric,
    resamples: usize,
    seed: u64,
) -> Result<ModulatedEval> {
    if plan.check.is_none() {
        return Err(Error::ManipulationCheck("plan carries no manipulation check".into()));
    }
    if prompts.is_empty() {
        return Err(invalid("no prompts to evaluate"));
    }
    if resamples == 0 {
        return Err(invalid("bootstrap needs at least one resample"));
    }
    let rows = prompts
        .par_iter()
        .map(|p| {
            let base = prompt_outcome(model, vocab, p, world, &Hooks::new())?;
            match plan.delta_for(&p.entity) {
                Some(delta) => {
                    let hooks = Hooks::new().with(plan.layer(), p.entity_position, delta)?;
                    Ok((base, prompt_outcome(model, vocab, p, world, &hooks)?, false))
                }
                None => Ok((base.clone(), base, true)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let other = metric.other();
    let score = |m: &SuccessMetric, modded: bool| -> Vec<f64> {
        rows.iter().map(|(b, h, _)| if modded { h.success(m) } else { b.success(m) }).collect()
    };
    let mut unmodulated: Vec<String> =
        prompts.iter().zip(&rows).filter(|(_, r)| r.2).map(|(p, _)| p.entity.clone()).collect();
    unmodulated.dedup();
    Ok(ModulatedEval {
        primary: delta_success(metric.id(), &score(metric, false), &score(metric, true), resamples, seed),
        contrast: delta_success(
            other.id(),
            &score(&other, false),
            &score(&other, true),
            resamples,
            derive_seed(seed, &[1]),
        ),
        n_prompts: prompts.len(),
        unmodulated,
    })
}
