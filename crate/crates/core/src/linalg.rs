//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Spectral norm (largest singular value).
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Smallest singular value of a tall (or square) matrix; zero when `rows < cols`.
pub fn sigma_min(a: &DMatrix<f64>) -> f64 {
    if a.nrows() < a.ncols() {
        return 0.0;
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `A^T diag(d) A` without forming `diag(d)`.
pub fn weighted_gram(a: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let mut scaled = a.clone();
    for (mut row, &w) in scaled.row_iter_mut().zip(d) {
        row *= w;
    }
    a.transpose() * scaled
}

pub fn relative_l2(approx: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    let diff = (approx - reference).norm();
    let scale = reference.norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn relative_frobenius(approx: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let diff = (approx - reference).norm();
    let scale = reference.norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
