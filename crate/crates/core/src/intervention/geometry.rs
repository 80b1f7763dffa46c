// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::correspondence::DissimilarityMatrix;
use crate::error::{invalid, Error, Result};
use crate::linalg::{center_columns, sorted_sym_eigen, to_matrix, to_rows};

/// Eigenvalues below this fraction of the largest count as zero.
const EIGEN_TOL: f64 = 1e-9;

/// Classical MDS configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// One row per entity, `dims` columns.
    pub coords: Vec<Vec<f64>>,
    /// All eigenvalues of the double-centred squared-distance matrix,
    /// descending.
    pub eigenvalues: Vec<f64>,
    /// Number of strictly positive eigenvalues.
    pub available: usize,
}

impl Embedding {
    pub fn dims(&self) -> usize {
        self.coords.first().map_or(0, Vec::len)
    }
}

pub(crate) fn mds_matrix(d: &DissimilarityMatrix, max_dims: usize) -> (DMatrix<f64>, Vec<f64>, usize) {
    let n = d.n();
    let mut sq = DMatrix::from_fn(n, n, |i, j| d.get(i, j).powi(2));
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            sq[(i, j)] = -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand);
        }
    }
    let (values, vectors) = sorted_sym_eigen(sq);
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let available = values.iter().filter(|&&v| v > top * EIGEN_TOL && v > 0.0).count();
    let k = available.min(max_dims);
    let coords = DMatrix::from_fn(n, k, |i, j| vectors[(i, j)] * values[j].sqrt());
    (coords, values, available)
}

/// Embed a dissimilarity matrix in at most `max_dims` dimensions.
pub fn classical_mds(d: &DissimilarityMatrix, max_dims: usize) -> Result<Embedding> {
    if d.n() < 2 {
        return Err(invalid("MDS needs at least two entities"));
    }
    let (coords, eigenvalues, available) = mds_matrix(d, max_dims);
    Ok(Embedding { coords: to_rows(&coords), eigenvalues, available })
}

/// Similarity transform (rotation or reflection, uniform scale, translation)
/// of `source` that best matches `target` in least squares.
pub(crate) fn procrustes_matrix(source: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if source.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "Procrustes shapes {:?} and {:?}",
            source.shape(),
            target.shape()
        )));
    }
    let (sc, _) = center_columns(source);
    let (tc, tm) = center_columns(target);
    let norm = sc.norm_squared();
    let mut out = DMatrix::zeros(source.nrows(), source.ncols());
    if norm > 0.0 {
        let svd = (sc.transpose() * &tc).svd(true, true);
        let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
        let scale = svd.singular_values.sum() / norm;
        out = (sc * (u * vt)) * scale;
    }
    for mut row in out.row_iter_mut() {
        for (x, m) in row.iter_mut().zip(tm.iter()) {
            *x += m;
        }
    }
    Ok(out)
}

/// `source` after its best similarity transform onto `target`.
pub fn procrustes_align(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(to_rows(&procrustes_matrix(&to_matrix(source), &to_matrix(target))?))
}
