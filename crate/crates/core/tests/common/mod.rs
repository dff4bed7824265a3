#![allow(dead_code)]

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use serde_json::Value;
use softnewton::harness::{generate, GenOptions};
use softnewton::{ActivationKind, ProblemInstance};

pub const S1_JSON: &str = include_str!("../golden/s1.json");

pub fn golden() -> Value {
    serde_json::from_str(S1_JSON).unwrap()
}

pub fn s1() -> ProblemInstance {
    ProblemInstance::new(
        dmatrix![0.1, 0.2; -0.3, 0.4; 0.5, -0.6],
        dmatrix![1.0, 0.0, 1.0; 0.0, 1.0, 0.0],
        dvector![0.2, 0.1],
        dvector![2.0, 2.0, 2.0],
        ActivationKind::Tanh,
        std::f64::consts::SQRT_2,
        0.05,
    )
    .unwrap()
}

pub fn s1_x() -> DVector<f64> {
    dvector![0.3, -0.2]
}

pub fn vecf(v: &Value) -> DVector<f64> {
    DVector::from_vec(v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
}

pub fn matf(v: &Value) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
        .collect();
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

/// Largest entrywise error relative to `max(1, max |expected|)`.
pub fn scaled_err(got: &DMatrix<f64>, expected: &DMatrix<f64>) -> f64 {
    assert_eq!(got.shape(), expected.shape());
    (got - expected).amax() / expected.amax().max(1.0)
}

pub fn vec_err(got: &DVector<f64>, expected: &DVector<f64>) -> f64 {
    assert_eq!(got.len(), expected.len());
    (got - expected).amax() / expected.amax().max(1.0)
}

/// Random instance with `n, m, d` in `1..=10` derived from `seed`.
pub fn random_instance(seed: u64) -> ProblemInstance {
    let pick = |k: u64| {
        (((seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(k * 1442695040888963407))
            >> 33)
            % 10
            + 1) as usize
    };
    let kind = ActivationKind::ALL[(seed % 4) as usize];
    generate(&GenOptions {
        noise: 0.1,
        ..GenOptions::new(pick(1), pick(2), pick(3), kind, seed)
    })
    .unwrap()
    .instance
}
