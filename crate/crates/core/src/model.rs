//! Problem data, the forward pass, and the three losses.
//!
//! The loss is
//!
//! ```text
//! L(x)     = 1/2 || h(A2 softmax(A1 x)) - b ||^2
//! L_reg(x) = 1/2 || diag(w) A1 x ||^2
//! L_tot    = L + L_reg
//! ```
//!
//! with `h` applied coordinatewise. The softmax is evaluated with the usual
//! max-shift so `f` stays accurate when `exp(A1 x)` itself would overflow;
//! the normalizer `alpha` is tracked in log space.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::activation::{Activation, ActivationKind};
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BETA: f64 = 0.05;

const NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    a1: DMatrix<f64>,
    a2: DMatrix<f64>,
    b: DVector<f64>,
    w: DVector<f64>,
    activation: Activation,
    r: f64,
    beta: f64,
}

impl ProblemInstance {
    /// Validated constructor. Requires `w_i > 0`.
    pub fn new(
        a1: DMatrix<f64>,
        a2: DMatrix<f64>,
        b: DVector<f64>,
        w: DVector<f64>,
        kind: ActivationKind,
        r: f64,
        beta: f64,
    ) -> Result<Self> {
        let inst = Self::new_relaxed(a1, a2, b, w, kind, r, beta)?;
        if let Some(i) = inst.w.iter().position(|&v| v <= 0.0) {
            return Err(Error::InvalidInstance(format!(
                "regularization weight w[{i}] = {} must be positive",
                inst.w[i]
            )));
        }
        Ok(inst)
    }

    /// Same checks as [`ProblemInstance::new`] except that zero weights are
    /// accepted, which switches the regularizer off in those coordinates.
    pub fn new_relaxed(
        a1: DMatrix<f64>,
        a2: DMatrix<f64>,
        b: DVector<f64>,
        w: DVector<f64>,
        kind: ActivationKind,
        r: f64,
        beta: f64,
    ) -> Result<Self> {
        let (n, d) = a1.shape();
        let m = a2.nrows();
        if n == 0 || d == 0 || m == 0 {
            return Err(Error::InvalidInstance(format!(
                "dimensions must be positive (n={n}, m={m}, d={d})"
            )));
        }
        if a2.ncols() != n {
            return Err(Error::Dimension {
                what: "A2 columns",
                expected: n,
                got: a2.ncols(),
            });
        }
        if b.len() != m {
            return Err(Error::Dimension {
                what: "b",
                expected: m,
                got: b.len(),
            });
        }
        if w.len() != n {
            return Err(Error::Dimension {
                what: "w",
                expected: n,
                got: w.len(),
            });
        }
        for (name, ok) in [
            ("A1", a1.iter().all(|v| v.is_finite())),
            ("A2", a2.iter().all(|v| v.is_finite())),
            ("b", b.iter().all(|v| v.is_finite())),
            ("w", w.iter().all(|v| v.is_finite())),
        ] {
            if !ok {
                return Err(Error::InvalidInstance(format!("{name} has non-finite entries")));
            }
        }
        if let Some(i) = w.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidInstance(format!("w[{i}] is negative")));
        }
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidInstance(format!("R = {r} must be positive")));
        }
        if !(beta > 0.0 && beta <= 0.1) {
            return Err(Error::InvalidInstance(format!("beta = {beta} must lie in (0, 0.1]")));
        }
        let a1_norm = spectral_norm(&a1);
        let a2_norm = spectral_norm(&a2);
        if a1_norm > r * (1.0 + NORM_SLACK) || a2_norm > r * (1.0 + NORM_SLACK) {
            return Err(Error::InvalidInstance(format!(
                "spectral norms ||A1|| = {a1_norm}, ||A2|| = {a2_norm} exceed R = {r}"
            )));
        }
        let activation = Activation::for_instance(kind, m, a2_norm);
        Ok(ProblemInstance {
            a1,
            a2,
            b,
            w,
            activation,
            r,
            beta,
        })
    }

    pub fn n(&self) -> usize {
        self.a1.nrows()
    }
    pub fn d(&self) -> usize {
        self.a1.ncols()
    }
    pub fn m(&self) -> usize {
        self.a2.nrows()
    }
    pub fn a1(&self) -> &DMatrix<f64> {
        &self.a1
    }
    pub fn a2(&self) -> &DMatrix<f64> {
        &self.a2
    }
    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }
    pub fn w(&self) -> &DVector<f64> {
        &self.w
    }
    pub fn activation(&self) -> &Activation {
        &self.activation
    }
    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Entries `w_i^2`.
    pub fn w2(&self) -> DVector<f64> {
        self.w.component_mul(&self.w)
    }

    pub fn with_b(&self, b: DVector<f64>) -> Result<Self> {
        Self::new_relaxed(
            self.a1.clone(),
            self.a2.clone(),
            b,
            self.w.clone(),
            self.activation.kind,
            self.r,
            self.beta,
        )
    }

    pub fn with_w(&self, w: DVector<f64>) -> Result<Self> {
        Self::new_relaxed(
            self.a1.clone(),
            self.a2.clone(),
            self.b.clone(),
            w,
            self.activation.kind,
            self.r,
            self.beta,
        )
    }

    pub fn to_doc(&self) -> InstanceDoc {
        InstanceDoc {
            schema_version: SCHEMA_VERSION,
            n: self.n(),
            m: self.m(),
            d: self.d(),
            a1: rows_of(&self.a1),
            a2: rows_of(&self.a2),
            b: self.b.iter().cloned().collect(),
            w: self.w.iter().cloned().collect(),
            activation: self.activation.kind,
            r: self.r,
            beta: self.beta,
        }
    }

    pub fn from_doc(doc: &InstanceDoc) -> Result<Self> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidInstance(format!(
                "unsupported schema_version {}",
                doc.schema_version
            )));
        }
        let a1 = matrix_from_rows("A1", &doc.a1, doc.n, doc.d)?;
        let a2 = matrix_from_rows("A2", &doc.a2, doc.m, doc.n)?;
        if doc.b.len() != doc.m {
            return Err(Error::Dimension {
                what: "b",
                expected: doc.m,
                got: doc.b.len(),
            });
        }
        ProblemInstance::new(
            a1,
            a2,
            DVector::from_vec(doc.b.clone()),
            DVector::from_vec(doc.w.clone()),
            doc.activation,
            doc.r,
            doc.beta,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: InstanceDoc = serde_json::from_str(text)?;
        Self::from_doc(&doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))
    }
}

/// On-disk representation of a [`ProblemInstance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDoc {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    #[serde(rename = "A1")]
    pub a1: Vec<Vec<f64>>,
    #[serde(rename = "A2")]
    pub a2: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub w: Vec<f64>,
    pub activation: ActivationKind,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

pub(crate) fn rows_of(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

pub(crate) fn matrix_from_rows(
    what: &'static str,
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::Dimension {
            what,
            expected: nrows,
            got: rows.len(),
        });
    }
    for r in rows {
        if r.len() != ncols {
            return Err(Error::Dimension {
                what,
                expected: ncols,
                got: r.len(),
            });
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Cached forward pass at a point `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub x: DVector<f64>,
    /// `A1 x`, i.e. `log u`.
    pub z: DVector<f64>,
    /// `exp(A1 x)`; entries may overflow to infinity or underflow to zero,
    /// `f` does not depend on them.
    pub u: DVector<f64>,
    pub log_alpha: f64,
    pub alpha: f64,
    pub f: DVector<f64>,
    pub a2f: DVector<f64>,
    pub hval: DVector<f64>,
    pub hprime: DVector<f64>,
    pub hdoubleprime: DVector<f64>,
    pub c: DVector<f64>,
    pub loss_l: f64,
    pub loss_reg: f64,
    pub loss_tot: f64,
}

impl ModelState {
    /// `alpha(x) >= beta`, evaluated in log space.
    pub fn meets_alpha_floor(&self, beta: f64) -> bool {
        self.log_alpha >= beta.ln()
    }
}

pub fn eval_forward(inst: &ProblemInstance, x: &DVector<f64>) -> Result<ModelState> {
    if x.len() != inst.d() {
        return Err(Error::Dimension {
            what: "x",
            expected: inst.d(),
            got: x.len(),
        });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Overflow {
            quantity: "x",
            coordinate: i,
        });
    }
    let z = inst.a1() * x;
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::Overflow {
            quantity: "A1 x",
            coordinate: i,
        });
    }
    let z_max = z.max();
    let shifted = z.map(|v| (v - z_max).exp());
    let total: f64 = shifted.sum();
    let f = &shifted / total;
    let log_alpha = z_max + total.ln();
    let u = z.map(f64::exp);

    let a2f = inst.a2() * &f;
    let act = inst.activation().eval(&a2f);
    let c = &act.h - inst.b();
    if let Some(k) = c.iter().position(|v| !v.is_finite()) {
        return Err(Error::Overflow {
            quantity: "c",
            coordinate: k,
        });
    }
    let loss_l = 0.5 * c.norm_squared();
    let loss_reg = 0.5
        * z.iter()
            .zip(inst.w().iter())
            .map(|(zi, wi)| (wi * zi) * (wi * zi))
            .sum::<f64>();
    if !loss_reg.is_finite() {
        let i = z
            .iter()
            .zip(inst.w().iter())
            .position(|(zi, wi)| !((wi * zi) * (wi * zi)).is_finite())
            .unwrap_or(0);
        return Err(Error::Overflow {
            quantity: "regularizer",
            coordinate: i,
        });
    }

    Ok(ModelState {
        x: x.clone(),
        z,
        u,
        log_alpha,
        alpha: log_alpha.exp(),
        f,
        a2f,
        hval: act.h,
        hprime: act.hprime,
        hdoubleprime: act.hdoubleprime,
        c,
        loss_l,
        loss_reg,
        loss_tot: loss_l + loss_reg,
    })
}
