// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

use super::PointSet;

/// Symmetric, zero-diagonal, non-negative matrix over a labelled entity set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityMatrix {
    labels: Vec<String>,
    /// Row-major n*n.
    values: Vec<f64>,
}

impl DissimilarityMatrix {
    /// Build from an entry function evaluated on the upper triangle only.
    pub fn from_fn(labels: Vec<String>, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let n = labels.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = f(i, j);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Self { labels, values }
    }

    /// Build from explicit entries, checking the invariants.
    pub fn new(labels: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = labels.len();
        if values.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels but {} entries",
                n,
                values.len()
            )));
        }
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(invalid(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(invalid(format!("entry ({i},{j}) = {v} is not a finite non-negative number")));
                }
                if v != values[j * n + i] {
                    return Err(invalid(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { labels, values })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    /// Strict upper triangle in row-major order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(self.values[i * n + j]);
            }
        }
        out
    }

    /// Matrix whose entry (i, j) is this matrix's entry (perm[i], perm[j]).
    /// Labels follow their rows.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let labels = perm.iter().map(|&p| self.labels[p].clone()).collect();
        Self::from_fn(labels, |i, j| self.get(perm[i], perm[j]))
    }

    /// Rows restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        self.permuted(indices)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["entity".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (i, label) in self.labels.iter().enumerate() {
            let mut row = vec![label.clone()];
            row.extend((0..self.n()).map(|j| format!("{}", self.get(i, j))));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let labels: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut values = Vec::with_capacity(labels.len() * labels.len());
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.get(0) != labels.get(i).map(String::as_str) {
                return Err(invalid(format!("row {i} label does not match header")));
            }
            for cell in rec.iter().skip(1) {
                values.push(cell.parse::<f64>().map_err(|e| invalid(format!("bad entry {cell:?}: {e}")))?);
            }
        }
        Self::new(labels, values)
    }
}

/// Distance used to build a representational dissimilarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RdmMetric {
    Euclidean,
    /// 1 - cosine similarity; zero vectors are at distance 1 from everything.
    Cosine,
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// Representational dissimilarity matrix of a point set.
pub fn rdm(points: &PointSet, metric: RdmMetric) -> Result<DissimilarityMatrix> {
    rdm_of_vectors(points.entities.clone(), &points.vectors, metric)
}

pub fn rdm_of_vectors(
    labels: Vec<String>,
    vectors: &[Vec<f64>],
    metric: RdmMetric,
) -> Result<DissimilarityMatrix> {
    if vectors.len() < 2 {
        return Err(invalid("an RDM needs at least two points"));
    }
    if labels.len() != vectors.len() {
        return Err(Error::ShapeMismatch("labels and vectors differ in length".into()));
    }
    Ok(DissimilarityMatrix::from_fn(labels, |i, j| match metric {
        RdmMetric::Euclidean => euclidean(&vectors[i], &vectors[j]),
        RdmMetric::Cosine => {
            // identical vectors are at distance exactly 0
            if vectors[i] == vectors[j] {
                0.0
            } else {
                cosine_distance(&vectors[i], &vectors[j])
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i}")).collect()
    }

    #[test]
    fn identical_vectors_have_zero_distance() {
        let v = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        for m in [RdmMetric::Euclidean, RdmMetric::Cosine] {
            assert_eq!(rdm_of_vectors(labels(2), &v, m).unwrap().get(0, 1), 0.0);
        }
    }

    #[test]
    fn orthogonal_unit_vectors_have_cosine_distance_one() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(rdm_of_vectors(labels(2), &v, RdmMetric::Cosine).unwrap().get(0, 1), 1.0);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn random_vectors_match_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let d = rdm_of_vectors(labels(16), &v, RdmMetric::Euclidean).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += (v[i][k] - v[j][k]).powi(2);
                }
                assert!((d.get(i, j) - s.sqrt()).abs() < 1e-12);
            }
        }
        let c = rdm_of_vectors(labels(16), &v, RdmMetric::Cosine).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                if i == j {
                    continue;
                }
                let dot: f64 = (0..5).map(|k| v[i][k] * v[j][k]).sum();
                let ni: f64 = (0..5).map(|k| v[i][k] * v[i][k]).sum::<f64>().sqrt();
                let nj: f64 = (0..5).map(|k| v[j][k] * v[j][k]).sum::<f64>().sqrt();
                assert!((c.get(i, j) - (1.0 - dot / (ni * nj))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invariants_checked_on_construction() {
        assert!(DissimilarityMatrix::new(labels(2), vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(DissimilarityMatrix::new(labels(2), vec![1.0, 1.0, 1.0, 0.0]).is_err());
        assert!(DissimilarityMatrix::new(labels(2), vec![0.0, -1.0, -1.0, 0.0]).is_err());
        assert!(DissimilarityMatrix::new(labels(2), vec![0.0, 1.0, 1.0, 0.0]).is_ok());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = DissimilarityMatrix::from_fn(labels(5), |_, _| rng.random_range(0.0..10.0));
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("entity,e0,e1,e2,e3,e4"));
        assert_eq!(DissimilarityMatrix::read_csv(&buf[..]).unwrap(), d);
    }
}
