//! Coordinatewise outer activations `h` with exact first and second derivatives.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Identity,
    Tanh,
    Sigmoid,
    Softplus,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [
        ActivationKind::Identity,
        ActivationKind::Tanh,
        ActivationKind::Sigmoid,
        ActivationKind::Softplus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Identity => "identity",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Softplus => "softplus",
        }
    }

    /// Returns `(h(y), h'(y), h''(y))`.
    #[inline]
    pub fn eval_scalar(self, y: f64) -> (f64, f64, f64) {
        match self {
            ActivationKind::Identity => (y, 1.0, 0.0),
            ActivationKind::Tanh => {
                let t = y.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(y);
                let d = s * (1.0 - s);
                (s, d, d * (1.0 - 2.0 * s))
            }
            ActivationKind::Softplus => {
                let s = sigmoid(y);
                (softplus(y), s, s * (1.0 - s))
            }
        }
    }

    /// Common Lipschitz constant of `h` and `h'`, i.e. an upper bound on both
    /// `sup |h'|` and `sup |h''|`.
    pub fn lipschitz(self) -> f64 {
        // identity: |h'| = 1, h'' = 0
        // tanh: |h'| <= 1, |h''| <= 4/(3 sqrt 3)
        // sigmoid: |h'| <= 1/4, |h''| <= 1/(6 sqrt 3)
        // softplus: |h'| <= 1, |h''| <= 1/4
        1.0
    }

    /// Upper bound on `max(||h(A2 f)||_2, ||h'(A2 f)||_2)` valid for every
    /// probability vector `f`, given `||A2||` and the output dimension `m`.
    ///
    /// Uses `||A2 f||_2 <= ||A2|| ||f||_2 <= ||A2||` since `||f||_1 = 1`.
    pub fn norm_cap(self, m: usize, a2_norm: f64) -> f64 {
        let root_m = (m as f64).sqrt();
        match self {
            ActivationKind::Identity => root_m.max(a2_norm),
            ActivationKind::Tanh | ActivationKind::Sigmoid => root_m,
            // softplus(y) <= ln 2 + |y|
            ActivationKind::Softplus => root_m.max(root_m * std::f64::consts::LN_2 + a2_norm),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(ActivationKind::Identity),
            "tanh" => Ok(ActivationKind::Tanh),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "softplus" => Ok(ActivationKind::Softplus),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// An activation together with the constants the bound calculators need.
///
/// `l_h` is the shared Lipschitz constant of `h` and `h'`. `r_h` bounds
/// `||h(A2 f(x))||_2` and `||h'(A2 f(x))||_2` for the instance it was built for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub kind: ActivationKind,
    pub l_h: f64,
    pub r_h: f64,
}

impl Activation {
    pub fn for_instance(kind: ActivationKind, m: usize, a2_norm: f64) -> Self {
        Activation {
            kind,
            l_h: kind.lipschitz(),
            r_h: kind.norm_cap(m, a2_norm),
        }
    }

    pub fn eval(&self, y: &DVector<f64>) -> ActivationValues {
        let m = y.len();
        let mut h = DVector::zeros(m);
        let mut hp = DVector::zeros(m);
        let mut hpp = DVector::zeros(m);
        for k in 0..m {
            let (a, b, c) = self.kind.eval_scalar(y[k]);
            h[k] = a;
            hp[k] = b;
            hpp[k] = c;
        }
        ActivationValues {
            h,
            hprime: hp,
            hdoubleprime: hpp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationValues {
    pub h: DVector<f64>,
    pub hprime: DVector<f64>,
    pub hdoubleprime: DVector<f64>,
}

#[inline]
fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(y: f64) -> f64 {
    // log(1 + e^y) = max(y, 0) + log1p(e^{-|y|})
    y.max(0.0) + (-y.abs()).exp().ln_1p()
}
