// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{invalid, Error, Result};

use super::rdm::euclidean;

/// Leave-one-out offset consistency over relation pairs `(a_i, b_i)`.
///
/// For each held-out pair `j` the prediction is `a_j` plus the mean offset
/// `b_i - a_i` over the other pairs. A hit is scored when the nearest of all
/// `2n` points other than `a_j` is `b_j`. Chance level is `1 / (2n - 1)`.
pub fn analogy_consistency(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let n = a.len();
    if b.len() != n {
        return Err(Error::ShapeMismatch(format!("{} sources but {} targets", n, b.len())));
    }
    if n < 2 {
        return Err(invalid("analogy consistency needs at least two pairs"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch("points differ in width".into()));
    }
    let offsets: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(x, y)| y.iter().zip(x).map(|(p, q)| p - q).collect())
        .collect();
    let mut hits = 0usize;
    for j in 0..n {
        let mut mean = vec![0.0; d];
        for (i, off) in offsets.iter().enumerate() {
            if i != j {
                for (m, o) in mean.iter_mut().zip(off) {
                    *m += o;
                }
            }
        }
        let predicted: Vec<f64> = a[j]
            .iter()
            .zip(&mean)
            .map(|(x, m)| x + m / (n - 1) as f64)
            .collect();
        // candidates: every a_i except a_j, then every b_i; ties go to the
        // earlier candidate
        let mut best: Option<(f64, usize, bool)> = None;
        let candidates = (0..n)
            .filter(|&i| i != j)
            .map(|i| (i, false))
            .chain((0..n).map(|i| (i, true)));
        for (i, is_b) in candidates {
            let v = if is_b { &b[i] } else { &a[i] };
            let dist = euclidean(&predicted, v);
            if best.is_none_or(|(bd, _, _)| dist < bd) {
                best = Some((dist, i, is_b));
            }
        }
        if let Some((_, i, true)) = best {
            if i == j {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_offset_is_fully_consistent() {
        let a = vec![vec![0.0, 0.0], vec![3.0, 1.0], vec![-2.0, 5.0], vec![1.0, -4.0]];
        let v = [0.5, 2.0];
        let b: Vec<Vec<f64>> = a.iter().map(|x| vec![x[0] + v[0], x[1] + v[1]]).collect();
        assert_eq!(analogy_consistency(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn two_pairs_use_the_single_remaining_offset() {
        let a = vec![vec![0.0, 0.0], vec![10.0, 0.0]];
        let b = vec![vec![1.0, 0.0], vec![11.0, 0.0]];
        assert_eq!(analogy_consistency(&a, &b).unwrap(), 1.0);
        // offsets (0, 5) and (1, -5) send each pair to the other's partner
        let b2 = vec![vec![0.0, 5.0], vec![11.0, -5.0]];
        assert_eq!(analogy_consistency(&a, &b2).unwrap(), 0.0);
    }

    #[test]
    fn random_points_sit_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 6;
        let trials = 3000;
        let mut total = 0.0;
        for _ in 0..trials {
            let mut draw = || -> Vec<Vec<f64>> {
                (0..n).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
            };
            let a = draw();
            let b = draw();
            total += analogy_consistency(&a, &b).unwrap();
        }
        let mean = total / trials as f64;
        let chance = 1.0 / (2 * n - 1) as f64;
        // binomial standard error of the mean, loose 5-sigma bound
        let se = (chance * (1.0 - chance) / (trials * n) as f64).sqrt();
        assert!((mean - chance).abs() < 5.0 * se + 0.01, "mean {mean} chance {chance}");
    }

    #[test]
    fn single_pair_is_an_error() {
        assert!(analogy_consistency(&[vec![0.0]], &[vec![1.0]]).is_err());
    }
}
