// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small dense linear-algebra helpers over `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, d, |i, j| rows[i][j])
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum() / n)
}

pub fn center_columns(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mu = column_means(m);
    let c = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - mu[j]);
    (c, mu)
}

/// Ridge regression with an unpenalized intercept.
///
/// Returns `(weights d×k, bias k)`. Uses the dual form when there are more
/// features than observations. With `lambda == 0` a singular normal matrix is
/// an error.
pub fn ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if x.nrows() != y.nrows() {
        return Err(Error::ShapeMismatch(format!("{} inputs vs {} targets", x.nrows(), y.nrows())));
    }
    let (xc, xm) = center_columns(x);
    let (yc, ym) = center_columns(y);
    let (n, d) = xc.shape();
    let singular = || {
        Error::Singular(format!(
            "normal equations are singular at lambda = {lambda}; use a positive ridge coefficient"
        ))
    };
    if lambda == 0.0 && rank(&xc, 1e-10) < d.min(n) {
        return Err(singular());
    }
    if lambda == 0.0 && d > n {
        return Err(singular());
    }
    let w = if d <= n {
        let mut g = xc.transpose() * &xc;
        for i in 0..d {
            g[(i, i)] += lambda;
        }
        let chol = g.cholesky().ok_or_else(singular)?;
        chol.solve(&(xc.transpose() * &yc))
    } else {
        let mut g = &xc * xc.transpose();
        for i in 0..n {
            g[(i, i)] += lambda;
        }
        let chol = g.cholesky().ok_or_else(singular)?;
        xc.transpose() * chol.solve(&yc)
    };
    if w.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    let b = ym - w.transpose() * xm;
    Ok((w, b))
}

/// Ridge coefficient from `candidates` with the smallest leave-one-out
/// squared error, computed in closed form from the hat matrix. Ties go to
/// the earlier candidate.
pub fn loo_ridge_lambda(x: &DMatrix<f64>, y: &DMatrix<f64>, candidates: &[f64]) -> f64 {
    let (xc, _) = center_columns(x);
    let (yc, _) = center_columns(y);
    let n = xc.nrows();
    let (values, vectors) = sorted_sym_eigen(&xc * xc.transpose());
    let mut best = (f64::INFINITY, candidates.first().copied().unwrap_or(0.0));
    for &lambda in candidates {
        let shrink = DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            values.iter().map(|&v| if v > 0.0 { v / (v + lambda) } else { 0.0 }),
        ));
        let h = &vectors * shrink * vectors.transpose();
        let fitted = &h * &yc;
        let mut err = 0.0;
        for i in 0..n {
            // Intercept adds 1/n to every leverage.
            let lev = 1.0 - h[(i, i)] - 1.0 / n as f64;
            if lev <= 1e-10 {
                err = f64::INFINITY;
                break;
            }
            err += (yc.row(i) - fitted.row(i)).norm_squared() / (lev * lev);
        }
        if err < best.0 {
            best = (err, lambda);
        }
    }
    best.1
}

/// Moore–Penrose pseudo-inverse with relative singular-value cutoff.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = smax * rel_tol;
    let u = svd.u.expect("u");
    let vt = svd.v_t.expect("v_t");
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            out += (vt.row(k).transpose() / s) * u.column(k).transpose();
        }
    }
    out
}

/// Numerical rank with relative singular-value cutoff.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let s = m.clone().singular_values();
    let smax = s.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > smax * rel_tol).count()
}

/// Eigen-decomposition of a symmetric matrix, eigenpairs sorted by
/// descending eigenvalue. Eigenvector signs are normalized so the entry of
/// largest magnitude is positive.
pub fn sorted_sym_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        let (mut best, mut best_abs) = (0, 0.0);
        for (r, v) in col.iter().enumerate() {
            if v.abs() > best_abs + 1e-12 {
                best = r;
                best_abs = v.abs();
            }
        }
        if col[best] < 0.0 {
            col = -col;
        }
        vectors.set_column(k, &col);
    }
    (values, vectors)
}
