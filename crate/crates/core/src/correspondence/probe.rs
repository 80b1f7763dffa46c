// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{ridge, to_matrix};
use crate::stats::{derive_seed, spearman};

use super::{PermutationResult, PointSet};

/// Linear ridge probe from activations to an attribute vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// `input_dim` rows of `output_dim` weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub lambda: f64,
    pub train_r2: f64,
    pub heldout_r2: f64,
    pub train_entities: Vec<String>,
    pub heldout_entities: Vec<String>,
}

impl ProbeModel {
    pub fn input_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn output_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (xi, row) in x.iter().zip(&self.weights) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }

    /// Input-space direction read by output `k`.
    pub fn direction(&self, k: usize) -> Vec<f64> {
        self.weights.iter().map(|row| row[k]).collect()
    }
}

/// Pooled coefficient of determination over all target dimensions.
pub fn r_squared(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let k = truth[0].len();
    let n = truth.len() as f64;
    let means: Vec<f64> = (0..k).map(|j| truth.iter().map(|t| t[j]).sum::<f64>() / n).collect();
    let (mut res, mut tot) = (0.0, 0.0);
    for (t, p) in truth.iter().zip(pred) {
        for j in 0..k {
            res += (t[j] - p[j]).powi(2);
            tot += (t[j] - means[j]).powi(2);
        }
    }
    if tot == 0.0 {
        return if res == 0.0 { 1.0 } else { 0.0 };
    }
    (1.0 - res / tot).min(1.0)
}

/// Fit a ridge probe on a seeded 80/20 entity split and report held-out R².
pub fn fit_probe(
    points: &PointSet,
    targets: &[Vec<f64>],
    lambda: f64,
    split_seed: u64,
) -> Result<ProbeModel> {
    let n = points.len();
    if n < 4 {
        return Err(invalid(format!("probe needs at least 4 entities, got {n}")));
    }
    if targets.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} points but {} targets", targets.len())));
    }
    if lambda < 0.0 {
        return Err(invalid("ridge coefficient must be non-negative"));
    }
    let k = targets[0].len();
    if targets.iter().any(|t| t.len() != k || t.iter().any(|v| !v.is_finite())) {
        return Err(invalid("targets must be finite and share a dimension"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_held = ((n as f64) * 0.2).ceil().max(1.0) as usize;
    let (held, train) = order.split_at(n_held);
    let mut train = train.to_vec();
    let mut held = held.to_vec();
    train.sort_unstable();
    held.sort_unstable();

    let x = to_matrix(&train.iter().map(|&i| points.vectors[i].clone()).collect::<Vec<_>>());
    let y = to_matrix(&train.iter().map(|&i| targets[i].clone()).collect::<Vec<_>>());
    let (w, b) = ridge(&x, &y, lambda)?;
    let mut probe = ProbeModel {
        weights: (0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect(),
        bias: b.iter().copied().collect(),
        lambda,
        train_r2: 0.0,
        heldout_r2: 0.0,
        train_entities: train.iter().map(|&i| points.entities[i].clone()).collect(),
        heldout_entities: held.iter().map(|&i| points.entities[i].clone()).collect(),
    };
    let r2 = |idx: &[usize]| {
        let truth: Vec<_> = idx.iter().map(|&i| targets[i].clone()).collect();
        let pred: Vec<_> = idx.iter().map(|&i| probe.predict(&points.vectors[i])).collect();
        r_squared(&truth, &pred)
    };
    let (train_r2, heldout_r2) = (r2(&train), r2(&held));
    probe.train_r2 = train_r2;
    probe.heldout_r2 = heldout_r2;
    Ok(probe)
}

/// Spearman correlation between projections onto `direction` and scalar
/// targets.
pub fn ordering_correspondence(points: &PointSet, targets: &[f64], direction: &[f64]) -> Result<f64> {
    if targets.len() != points.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} points but {} targets",
            points.len(),
            targets.len()
        )));
    }
    if targets.windows(2).all(|w| w[0] == w[1]) {
        return Err(invalid("ordering targets are constant"));
    }
    if direction.len() != points.width() {
        return Err(Error::ShapeMismatch("direction width differs from points".into()));
    }
    let proj: Vec<f64> = points
        .vectors
        .iter()
        .map(|v| v.iter().zip(direction).map(|(a, b)| a * b).sum())
        .collect();
    spearman(&proj, targets)
}

/// Leave-one-out cross-fitted ordering score: each entity is scored by a
/// probe fitted without it, then the out-of-fold predictions are rank
/// correlated with the targets.
pub fn cross_fitted_ordering(points: &PointSet, targets: &[f64], lambda: f64) -> Result<f64> {
    let n = points.len();
    if n < 4 || targets.len() != n {
        return Err(invalid("cross-fitted ordering needs at least 4 matched entities"));
    }
    if targets.windows(2).all(|w| w[0] == w[1]) {
        return Err(invalid("ordering targets are constant"));
    }
    let mut preds = Vec::with_capacity(n);
    for held in 0..n {
        let rows: Vec<Vec<f64>> = (0..n).filter(|&i| i != held).map(|i| points.vectors[i].clone()).collect();
        let ys: Vec<Vec<f64>> = (0..n).filter(|&i| i != held).map(|i| vec![targets[i]]).collect();
        let (w, b) = ridge(&to_matrix(&rows), &to_matrix(&ys), lambda)?;
        let x = &points.vectors[held];
        preds.push(b[0] + x.iter().enumerate().map(|(j, v)| v * w[(j, 0)]).sum::<f64>());
    }
    spearman(&preds, targets)
}

/// Cross-fitted ordering score against a null of shuffled targets. The null
/// holds |rho| values; the p-value counts the observation.
pub fn ordering_shuffle_test(
    points: &PointSet,
    targets: &[f64],
    lambda: f64,
    n_shuffle: usize,
    seed: u64,
) -> Result<PermutationResult> {
    if n_shuffle == 0 {
        return Err(invalid("n_shuffle must be positive"));
    }
    let observed = cross_fitted_ordering(points, targets, lambda)?;
    let null = (0..n_shuffle)
        .into_par_iter()
        .map(|i| {
            let mut y = targets.to_vec();
            y.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64])));
            Ok(cross_fitted_ordering(points, &y, lambda)?.abs())
        })
        .collect::<Result<Vec<f64>>>()?;
    let extreme = null.iter().filter(|&&v| v >= observed.abs()).count();
    Ok(PermutationResult {
        observed,
        p_value: (extreme + 1) as f64 / (n_shuffle + 1) as f64,
        n_perm: n_shuffle,
        null,
    })
}
