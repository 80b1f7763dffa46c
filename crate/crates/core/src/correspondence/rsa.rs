// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stats::{average_ranks, pearson, percentile, random_permutation};

use super::DissimilarityMatrix;

/// Spearman correlation between the upper triangles of two RDMs.
pub fn rsa_score(internal: &DissimilarityMatrix, external: &DissimilarityMatrix) -> Result<f64> {
    check_pair(internal, external)?;
    crate::stats::spearman(&internal.upper_triangle(), &external.upper_triangle())
}

fn check_pair(a: &DissimilarityMatrix, b: &DissimilarityMatrix) -> Result<()> {
    if a.n() != b.n() {
        return Err(Error::ShapeMismatch(format!("RDM sizes {} and {}", a.n(), b.n())));
    }
    if a.n() < 3 {
        return Err(invalid("RSA needs at least three entities"));
    }
    Ok(())
}

/// Observed RSA score together with its entity-permutation null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub observed: f64,
    pub p_value: f64,
    pub n_perm: usize,
    /// Null scores in draw order.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub null: Vec<f64>,
}

impl PermutationResult {
    pub fn null_percentile(&self, q: f64) -> f64 {
        percentile(&self.null, q)
    }
}

/// One-sided permutation test of an RSA score.
///
/// Entity labels of the external matrix are shuffled; the p-value is
/// `(1 + #{null >= observed}) / (1 + n_perm)`.
pub fn permutation_test(
    internal: &DissimilarityMatrix,
    external: &DissimilarityMatrix,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationResult> {
    if n_perm < 100 {
        return Err(invalid(format!("n_perm must be at least 100, got {n_perm}")));
    }
    check_pair(internal, external)?;
    let n = internal.n();
    let int_ranks = average_ranks(&internal.upper_triangle());
    let observed = rsa_score(internal, external)?;

    // Ranks of a permuted upper triangle are the permuted ranks, so rank the
    // external matrix once and reindex it per draw.
    let ext_ranks_tri = average_ranks(&external.upper_triangle());
    let mut ext_ranks = vec![0.0; n * n];
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            ext_ranks[i * n + j] = ext_ranks_tri[k];
            ext_ranks[j * n + i] = ext_ranks_tri[k];
            k += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut null = Vec::with_capacity(n_perm);
    let mut buf = Vec::with_capacity(int_ranks.len());
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        let perm = random_permutation(n, &mut rng);
        buf.clear();
        for i in 0..n {
            for j in i + 1..n {
                buf.push(ext_ranks[perm[i] * n + perm[j]]);
            }
        }
        let rho = pearson(&int_ranks, &buf)?;
        if rho >= observed {
            exceed += 1;
        }
        null.push(rho);
    }
    Ok(PermutationResult {
        observed,
        p_value: (1 + exceed) as f64 / (1 + n_perm) as f64,
        n_perm,
        null,
    })
}
