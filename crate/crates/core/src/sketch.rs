//! Leverage-score row sampling for weighted Gram matrices `A^T D A`.
//!
//! [`subsample`] draws `s = ceil(C d ln(n/delta) / eps0^2)` rows with
//! replacement and returns a sparse diagonal `D~` with `E[A^T D~ A] = A^T D A`.
//! When `s >= n` the exact diagonal is returned instead.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, weighted_gram};

/// Default sampling constant `C`.
pub const DEFAULT_SAMPLING_CONSTANT: f64 = 8.0;

/// Relative tolerance for rank decisions, as a multiple of the largest
/// singular value (or eigenvalue for Gram matrices).
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeptRow {
    pub index: usize,
    /// Number of draws that landed on this row.
    pub count: u32,
    /// `D~_ii`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchResult {
    pub n: usize,
    /// Rows with a nonzero weight, sorted by index.
    pub kept: Vec<KeptRow>,
    pub eps_target: f64,
    pub delta: f64,
    pub sampling_constant: f64,
    /// Requested sample count `s` (may exceed `n` on the exact path).
    pub samples: usize,
    /// `D~ = D` because `s >= n`.
    pub exact: bool,
    pub eps_measured: Option<f64>,
    pub seed: u64,
}

impl SketchResult {
    /// `D~` as a dense vector of length `n`.
    pub fn dtilde(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.n);
        for k in &self.kept {
            d[k.index] = k.weight;
        }
        d
    }

    pub fn distinct_rows(&self) -> usize {
        self.kept.len()
    }
}

/// Sample count for the given sizes; may exceed `n`.
pub fn sample_count(n: usize, d: usize, eps0: f64, delta: f64, c: f64) -> usize {
    let s = (c * d as f64 * (n as f64 / delta).ln() / (eps0 * eps0)).ceil();
    if s.is_finite() && s < usize::MAX as f64 {
        (s as usize).max(1)
    } else {
        usize::MAX
    }
}

fn check_weights(a: &DMatrix<f64>, dweights: &DVector<f64>) -> Result<()> {
    if dweights.len() != a.nrows() {
        return Err(Error::Dimension {
            what: "dweights",
            expected: a.nrows(),
            got: dweights.len(),
        });
    }
    if let Some(i) = dweights.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Config(format!(
            "sketch weight {i} is {} (must be positive and finite)",
            dweights[i]
        )));
    }
    Ok(())
}

/// Row leverage scores of `diag(sqrt(dweights)) A`.
///
/// Singular values below `RANK_TOLERANCE * sigma_max` are treated as zero,
/// so the scores sum to the numerical rank.
pub fn leverage_scores(a: &DMatrix<f64>, dweights: &DVector<f64>) -> Result<DVector<f64>> {
    check_weights(a, dweights)?;
    let mut scaled = a.clone();
    for (mut row, &w) in scaled.row_iter_mut().zip(dweights.iter()) {
        row *= w.sqrt();
    }
    let n = a.nrows();
    if scaled.is_empty() {
        return Ok(DVector::zeros(n));
    }
    let svd = scaled.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut tau = DVector::zeros(n);
    if sigma_max == 0.0 {
        return Ok(tau);
    }
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > RANK_TOLERANCE * sigma_max {
            for i in 0..n {
                tau[i] += u[(i, k)] * u[(i, k)];
            }
        }
    }
    tau.apply(|t| *t = t.clamp(0.0, 1.0));
    Ok(tau)
}

/// [`subsample_with`] using the default sampling constant.
pub fn subsample(a: &DMatrix<f64>, dweights: &DVector<f64>, eps0: f64, delta: f64, seed: u64) -> Result<SketchResult> {
    subsample_with(a, dweights, eps0, delta, seed, DEFAULT_SAMPLING_CONSTANT)
}

pub fn subsample_with(
    a: &DMatrix<f64>,
    dweights: &DVector<f64>,
    eps0: f64,
    delta: f64,
    seed: u64,
    c: f64,
) -> Result<SketchResult> {
    if !(eps0 > 0.0 && eps0 < 0.5) {
        return Err(Error::Config(format!("eps0 = {eps0} outside (0, 0.5)")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta = {delta} outside (0, 1)")));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("sampling constant {c} must be positive")));
    }
    check_weights(a, dweights)?;
    let (n, d) = (a.nrows(), a.ncols());
    let s = sample_count(n, d, eps0, delta, c);
    let mut out = SketchResult {
        n,
        kept: Vec::new(),
        eps_target: eps0,
        delta,
        sampling_constant: c,
        samples: s,
        exact: false,
        eps_measured: None,
        seed,
    };
    if s >= n {
        out.exact = true;
        out.eps_measured = Some(0.0);
        out.kept = (0..n)
            .map(|index| KeptRow {
                index,
                count: 1,
                weight: dweights[index],
            })
            .collect();
        return Ok(out);
    }

    let tau = leverage_scores(a, dweights)?;
    let floor = d as f64 / n as f64;
    let raw: Vec<f64> = tau.iter().map(|&t| t.max(floor)).collect();
    let total: f64 = raw.iter().sum();
    let sampler = WeightedIndex::new(&raw).map_err(|e| Error::Config(format!("sampling weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    for _ in 0..s {
        *counts.entry(sampler.sample(&mut rng)).or_insert(0) += 1;
    }
    out.kept = counts
        .into_iter()
        .map(|(index, count)| {
            let p = raw[index] / total;
            KeptRow {
                index,
                count,
                weight: count as f64 * dweights[index] / (s as f64 * p),
            }
        })
        .collect();
    Ok(out)
}

/// Largest `|mu - 1|` over the generalized eigenvalues `mu` of `(Y, X)`,
/// i.e. the smallest `eps` with `(1-eps) X <= Y <= (1+eps) X`.
///
/// `X` must be positive definite. With `project` set, eigenvalues of `X`
/// below `RANK_TOLERANCE * lambda_max(X)` are dropped and the comparison is
/// made on the range of `X`.
pub fn sandwich_deviation(x: &DMatrix<f64>, y: &DMatrix<f64>, project: bool) -> Result<f64> {
    if x.shape() != y.shape() || !x.is_square() {
        return Err(Error::Dimension {
            what: "sandwich operands",
            expected: x.nrows(),
            got: y.nrows(),
        });
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let eig = SymmetricEigen::new(symmetrize(x));
    let lam_max = eig.eigenvalues.max();
    let lam_min = eig.eigenvalues.min();
    let tol = RANK_TOLERANCE * lam_max.abs();
    if lam_max <= 0.0 || (lam_min <= tol && !project) {
        return Err(Error::Singular {
            lambda_min: lam_min,
            lambda_max: lam_max,
        });
    }
    let keep: Vec<usize> = (0..x.nrows()).filter(|&k| eig.eigenvalues[k] > tol).collect();
    let w = DMatrix::from_fn(x.nrows(), keep.len(), |i, j| {
        let k = keep[j];
        eig.eigenvectors[(i, k)] / eig.eigenvalues[k].sqrt()
    });
    let inner = symmetrize(&(w.transpose() * symmetrize(y) * &w));
    let mu = SymmetricEigen::new(inner).eigenvalues;
    Ok(mu.iter().fold(0.0, |acc, &m| acc.max((m - 1.0).abs())))
}

/// Measures the sandwich accuracy of `result` against `A^T D A` and stores
/// it in `result.eps_measured`. The exact path reports 0.
pub fn verify_sandwich(
    a: &DMatrix<f64>,
    dweights: &DVector<f64>,
    result: &mut SketchResult,
    project: bool,
) -> Result<f64> {
    check_weights(a, dweights)?;
    if result.n != a.nrows() {
        return Err(Error::Dimension {
            what: "sketch",
            expected: a.nrows(),
            got: result.n,
        });
    }
    let dt = result.dtilde();
    let eps = if dt == *dweights {
        0.0
    } else {
        let x = weighted_gram(a, dweights.as_slice());
        let y = weighted_gram(a, dt.as_slice());
        sandwich_deviation(&x, &y, project)?
    };
    result.eps_measured = Some(eps);
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn identity_rows_are_all_leveraged() {
        let tau = leverage_scores(&DMatrix::identity(4, 4), &DVector::from_element(4, 1.0)).unwrap();
        assert!(tau.iter().all(|&t| (t - 1.0).abs() <= 1e-14));
    }

    #[test]
    fn zero_row_has_zero_leverage() {
        let tau = leverage_scores(&dmatrix![1.0; 0.0], &dvector![3.0, 0.5]).unwrap();
        assert!((tau[0] - 1.0).abs() <= 1e-14);
        assert_eq!(tau[1], 0.0);
    }

    #[test]
    fn rank_deficient_scores_sum_to_rank() {
        let a = dmatrix![1.0, 2.0; 2.0, 4.0; -1.0, -2.0];
        let tau = leverage_scores(&a, &dvector![1.0, 2.0, 0.5]).unwrap();
        assert!((tau.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn nonpositive_weights_rejected() {
        assert!(leverage_scores(&DMatrix::identity(2, 2), &dvector![1.0, 0.0]).is_err());
    }

    #[test]
    fn large_sample_count_falls_back_to_exact() {
        let a = dmatrix![0.1, 0.2; -0.3, 0.4; 0.5, -0.6];
        let dw = dvector![4.0, 4.0, 4.0];
        let mut r = subsample(&a, &dw, 0.25, 0.1, 42).unwrap();
        assert!(r.exact);
        assert_eq!(r.dtilde(), dw);
        assert_eq!(verify_sandwich(&a, &dw, &mut r, false).unwrap(), 0.0);
    }

    #[test]
    fn doubled_weights_deviate_by_one() {
        let a = dmatrix![1.0, 0.0; 0.5, 1.0; 0.0, 2.0];
        let x = weighted_gram(&a, &[1.0, 2.0, 3.0]);
        let y = &x * 2.0;
        assert!((sandwich_deviation(&x, &y, false).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn singular_gram_needs_projection() {
        let x = dmatrix![1.0, 0.0; 0.0, 0.0];
        let y = dmatrix![1.1, 0.0; 0.0, 0.0];
        assert!(matches!(sandwich_deviation(&x, &y, false), Err(Error::Singular { .. })));
        assert!((sandwich_deviation(&x, &y, true).unwrap() - 0.1).abs() <= 1e-12);
    }

    #[test]
    fn identity_sketch_keeps_diagonal_structure() {
        let n = 150;
        let a = DMatrix::identity(n, n);
        let dw = DVector::from_element(n, 1.0);
        let r = subsample_with(&a, &dw, 0.3, 0.1, 7, 1e-3).unwrap();
        assert!(!r.exact);
        let y = weighted_gram(&a, r.dtilde().as_slice());
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    assert_eq!(y[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_sparse() {
        let n = 500;
        let a = DMatrix::from_fn(n, 2, |i, j| ((i * 7 + j * 3) as f64 * 0.11).sin());
        let dw = DVector::from_fn(n, |i, _| 1.0 + (i % 5) as f64);
        let r1 = subsample_with(&a, &dw, 0.3, 0.1, 11, 0.5).unwrap();
        let r2 = subsample_with(&a, &dw, 0.3, 0.1, 11, 0.5).unwrap();
        assert_eq!(r1, r2);
        assert!(!r1.exact);
        assert!(r1.distinct_rows() <= r1.samples.min(n));
        assert!(r1.kept.iter().all(|k| k.weight >= 0.0));
        let r3 = subsample_with(&a, &dw, 0.3, 0.1, 12, 0.5).unwrap();
        assert_ne!(r1.kept, r3.kept);
    }
}
