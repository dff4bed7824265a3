//! Analytic bound constants and empirical probes of the quantities they bound.
//!
//! The constants grow like `exp(k R^2)` and overflow `f64` for moderate `R`,
//! so every constant is carried as a [`Magnitude`] (a natural logarithm).
//! Probes measure the left-hand side of each inequality at concrete points
//! and report the ratio measured / bound.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::derivatives::{eval_p, eval_q2, grad_l};
use crate::error::{Error, Result};
use crate::hessian::{b_terms, curvature_kernel, entry_terms, EntryTerms};
use crate::linalg::spectral_norm;
use crate::model::{eval_forward, ModelState, ProblemInstance, SCHEMA_VERSION};
use crate::oracle::spectral;

/// A nonnegative real stored as its natural logarithm.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Magnitude {
    ln: f64,
}

impl Magnitude {
    pub const ZERO: Magnitude = Magnitude { ln: f64::NEG_INFINITY };
    pub const ONE: Magnitude = Magnitude { ln: 0.0 };

    pub fn new(value: f64) -> Self {
        assert!(value >= 0.0, "Magnitude of negative value {value}");
        Magnitude { ln: value.ln() }
    }

    /// `exp(exponent)`, without evaluating the exponential.
    pub fn exp(exponent: f64) -> Self {
        Magnitude { ln: exponent }
    }

    pub fn ln(self) -> f64 {
        self.ln
    }

    pub fn is_zero(self) -> bool {
        self.ln == f64::NEG_INFINITY
    }

    /// The value as `f64`; `inf` when it does not fit.
    pub fn value(self) -> f64 {
        self.ln.exp()
    }

    pub fn powf(self, k: f64) -> Self {
        if self.is_zero() {
            return if k > 0.0 { Self::ZERO } else { Self::ONE };
        }
        Magnitude { ln: self.ln * k }
    }

    pub fn log10(self) -> f64 {
        self.ln / std::f64::consts::LN_10
    }

    /// `(mantissa, exponent)` with `value = mantissa * 10^exponent` and
    /// `1 <= mantissa < 10` (both zero for the zero magnitude).
    pub fn scientific(self) -> (f64, i64) {
        if self.is_zero() {
            return (0.0, 0);
        }
        let l = self.log10();
        let e = l.floor();
        (10f64.powf(l - e), e as i64)
    }

    /// `measured / self`, with `0/0 = 0`.
    pub fn ratio_of(self, measured: f64) -> f64 {
        if measured == 0.0 {
            return 0.0;
        }
        (measured.ln() - self.ln).exp()
    }

    /// `measured <= self`, compared in log space.
    pub fn dominates(self, measured: f64) -> bool {
        measured <= 0.0 || measured.ln() <= self.ln
    }
}

impl std::ops::Mul for Magnitude {
    type Output = Magnitude;
    fn mul(self, rhs: Magnitude) -> Magnitude {
        if self.is_zero() || rhs.is_zero() {
            return Magnitude::ZERO;
        }
        Magnitude { ln: self.ln + rhs.ln }
    }
}

impl std::ops::Mul<f64> for Magnitude {
    type Output = Magnitude;
    fn mul(self, rhs: f64) -> Magnitude {
        self * Magnitude::new(rhs)
    }
}

impl fmt::Display for Magnitude {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (m, e) = self.scientific();
        write!(f, "{m:.4}e{e}")
    }
}

impl Serialize for Magnitude {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (m, e) = self.scientific();
        let mut st = s.serialize_struct("Magnitude", 3)?;
        st.serialize_field("ln", &(!self.is_zero()).then_some(self.ln))?;
        st.serialize_field("mantissa", &m)?;
        st.serialize_field("exp10", &e)?;
        st.end()
    }
}

/// The scalars every bound is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundParams {
    pub n: usize,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "R_h")]
    pub r_h: f64,
    #[serde(rename = "L_h")]
    pub l_h: f64,
    pub beta: f64,
}

impl BoundParams {
    /// Uses `R = max(R_declared, ||b||)` since the residual bound needs `||b|| <= R`.
    pub fn from_instance(inst: &ProblemInstance) -> Self {
        BoundParams {
            n: inst.n(),
            r: inst.r().max(inst.b().norm()),
            r_h: inst.activation().r_h,
            l_h: inst.activation().l_h,
            beta: inst.beta(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedBound {
    pub name: String,
    pub bound: Magnitude,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticBounds {
    pub params: BoundParams,
    #[serde(rename = "R_f")]
    pub r_f: Magnitude,
    #[serde(rename = "M")]
    pub m: Magnitude,
    pub psd_bound: Magnitude,
    pub per_term: Vec<NamedBound>,
    pub norms: Vec<NamedBound>,
    pub lipschitz: Vec<NamedBound>,
}

impl AnalyticBounds {
    fn find<'a>(list: &'a [NamedBound], name: &str) -> Option<Magnitude> {
        list.iter().find(|b| b.name == name).map(|b| b.bound)
    }
    pub fn norm(&self, name: &str) -> Option<Magnitude> {
        Self::find(&self.norms, name)
    }
    pub fn lipschitz(&self, name: &str) -> Option<Magnitude> {
        Self::find(&self.lipschitz, name)
    }
    pub fn term(&self, name: &str) -> Option<Magnitude> {
        Self::find(&self.per_term, name)
    }
}

pub fn compute_constants(inst: &ProblemInstance) -> AnalyticBounds {
    constants_for(BoundParams::from_instance(inst))
}

/// Evaluates every closed-form constant for the given parameters.
pub fn constants_for(p: BoundParams) -> AnalyticBounds {
    let n = Magnitude::new(p.n as f64);
    let r = Magnitude::new(p.r);
    let rh = Magnitude::new(p.r_h);
    let lh = Magnitude::new(p.l_h);
    let binv = Magnitude::new(p.beta).powf(-1.0);
    let r_plus = Magnitude::new(p.r + p.r_h);
    let r2 = p.r * p.r;
    let e = |k: f64| Magnitude::exp(k * r2);
    let sqrt_n = n.powf(0.5);

    let r_f = binv.powf(2.0) * n * r * e(2.0) * 2.0;
    let m = r_plus * n.powf(2.0) * e(4.0) * binv.powf(4.0) * r.powf(5.0) * rh.powf(2.0) * r_f * lh * 59.0;
    let psd = rh * lh * r * r_plus * 12.0;

    let q2_norm = r * rh;
    let mut per_term = Vec::with_capacity(12);
    for k in 1..=12 {
        let bound = match k {
            1..=4 => q2_norm.powf(2.0),
            5..=7 => q2_norm * Magnitude::new(2.0 * (p.l_h + 1.0)),
            8..=11 => r_plus * lh * r,
            _ => rh * r * r_plus,
        };
        per_term.push(NamedBound {
            name: format!("B{k}"),
            bound,
        });
    }

    let named = |pairs: Vec<(&str, Magnitude)>| -> Vec<NamedBound> {
        pairs
            .into_iter()
            .map(|(name, bound)| NamedBound {
                name: name.to_string(),
                bound,
            })
            .collect()
    };

    let norms = named(vec![
        ("f", binv * sqrt_n * e(1.0)),
        ("c", r_plus),
        ("Q2", q2_norm),
        ("q2", q2_norm * r_plus),
        ("p", r * binv.powf(2.0) * n * e(2.0) * 2.0),
    ]);

    let lip_u = r * e(1.0);
    let lipschitz = named(vec![
        ("u", lip_u),
        ("alpha", sqrt_n * lip_u),
        ("alpha_inv", binv.powf(2.0) * sqrt_n * lip_u),
        ("f", r_f),
        ("c", lh * r * r_f),
        ("Q2", r.powf(2.0) * r_f * lh),
        ("q2", r.powf(2.0) * r_f * rh * lh * r_plus * 2.0),
        (
            "g",
            binv.powf(2.0) * n * lh * rh * r_f * r.powf(2.0) * r_plus * e(5.0) * 7.0,
        ),
        ("p", r * r_f * binv * sqrt_n * e(1.0) * 3.0),
        (
            "G1",
            rh.powf(2.0) * r_f * r.powf(5.0) * lh * r_plus * binv.powf(4.0) * n.powf(2.0) * e(4.0) * 8.0,
        ),
        (
            "G2",
            rh * r_f * r.powf(4.0) * r_plus * binv.powf(4.0) * n.powf(2.0) * e(4.0) * 24.0,
        ),
        (
            "G3",
            r_plus * r.powf(4.0) * r_f * lh * binv.powf(3.0) * n.powf(1.5) * e(3.0) * 10.0,
        ),
        ("G4", r_plus * r.powf(4.0) * r_f * lh * binv * sqrt_n * e(1.0) * 4.0),
        (
            "G5",
            r_plus * r.powf(4.0) * r_f * lh * binv.powf(3.0) * n.powf(1.5) * e(3.0) * 10.0,
        ),
        ("G6", r_plus * r.powf(4.0) * r_f * lh * binv * sqrt_n * e(1.0) * 3.0),
        ("hessian", m),
    ]);

    AnalyticBounds {
        params: p,
        r_f,
        m,
        psd_bound: psd,
        per_term,
        norms,
        lipschitz,
    }
}

/// One measured-versus-bound comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub name: String,
    pub measured: f64,
    pub bound: Magnitude,
    pub tightness: f64,
    pub holds: bool,
    /// Whether a violation counts as a soundness failure.
    pub enforced: bool,
}

impl BoundCheck {
    fn new(name: String, measured: f64, bound: Magnitude, enforced: bool) -> Self {
        BoundCheck {
            name,
            measured,
            tightness: bound.ratio_of(measured),
            holds: bound.dominates(measured),
            bound,
            enforced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub schema_version: u32,
    pub analytic: AnalyticBounds,
    pub points_used: usize,
    pub points_excluded: usize,
    /// Pairs used for the Lipschitz probes (zero when fewer than two points).
    pub pairs_used: usize,
    pub b_lambda_min: f64,
    pub b_lambda_max: f64,
    pub checks: Vec<BoundCheck>,
}

impl BoundReport {
    pub fn check(&self, name: &str) -> Option<&BoundCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn violations(&self) -> Vec<&BoundCheck> {
        self.checks.iter().filter(|c| c.enforced && !c.holds).collect()
    }

    pub fn is_sound(&self) -> bool {
        self.violations().is_empty()
    }

    /// Plain-text table of every check.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>14} {:>14} {:>12}  {}\n",
            "quantity", "measured", "bound", "tightness", "ok"
        );
        for c in &self.checks {
            out.push_str(&format!(
                "{:<16} {:>14.6e} {:>14} {:>12.3e}  {}\n",
                c.name,
                c.measured,
                c.bound.to_string(),
                c.tightness,
                if c.holds { "yes" } else { "NO" }
            ));
        }
        out
    }
}

/// Everything measured at one admissible point.
struct PointProbe {
    x: DVector<f64>,
    state: ModelState,
    p: DMatrix<f64>,
    q2_mat: DMatrix<f64>,
    q2: DVector<f64>,
    grad_l: DVector<f64>,
    entries: EntryTerms,
    h_l: DMatrix<f64>,
}

impl PointProbe {
    fn at(inst: &ProblemInstance, state: ModelState) -> Self {
        let p = eval_p(&state, inst);
        let (q2_mat, q2) = eval_q2(&state, inst);
        let g = grad_l(&state, inst, &q2);
        let entries = entry_terms(&state, inst);
        let h_l = entries.sum();
        PointProbe {
            x: state.x.clone(),
            state,
            p,
            q2_mat,
            q2,
            grad_l: g,
            entries,
            h_l,
        }
    }
}

/// Measures the bounded quantities at `points` and compares them with the
/// constants evaluated at the effective `R` and `beta` of the probe set.
///
/// Points with `alpha(x) < beta` are excluded and counted. `R` is the
/// largest of `||A1||`, `||A2||`, `||b||` and `||x||` over the admissible
/// points; `beta` is the smallest admissible `alpha(x)`. Lipschitz checks are
/// skipped (and `pairs_used` is zero) with fewer than two admissible points.
pub fn probe_empirical(inst: &ProblemInstance, points: &[DVector<f64>]) -> Result<BoundReport> {
    let mut probes = Vec::new();
    let mut excluded = 0;
    for x in points {
        let st = eval_forward(inst, x)?;
        if st.meets_alpha_floor(inst.beta()) {
            probes.push(PointProbe::at(inst, st));
        } else {
            log::warn!(
                "probe point excluded: alpha = {:e} below beta = {}",
                st.alpha,
                inst.beta()
            );
            excluded += 1;
        }
    }
    if probes.is_empty() {
        return Err(Error::InsufficientPoints(format!(
            "no admissible probe points ({excluded} excluded by the alpha floor)"
        )));
    }

    let a1_norm = spectral_norm(inst.a1());
    let a2_norm = spectral_norm(inst.a2());
    let x_max = probes.iter().map(|p| p.x.norm()).fold(0.0, f64::max);
    let r = a1_norm.max(a2_norm).max(inst.b().norm()).max(x_max);
    let beta = probes
        .iter()
        .map(|p| p.state.log_alpha)
        .fold(f64::INFINITY, f64::min)
        .exp()
        .max(inst.beta());
    let analytic = constants_for(BoundParams {
        n: inst.n(),
        r,
        r_h: inst.activation().r_h,
        l_h: inst.activation().l_h,
        beta,
    });

    let mut checks = Vec::new();

    // norms
    let max_over = |f: &dyn Fn(&PointProbe) -> f64| probes.iter().map(f).fold(0.0, f64::max);
    let norm_measured: [(&str, f64); 5] = [
        ("f", max_over(&|p| p.state.f.norm())),
        ("c", max_over(&|p| p.state.c.norm())),
        ("Q2", max_over(&|p| spectral_norm(&p.q2_mat))),
        ("q2", max_over(&|p| p.q2.norm())),
        (
            "p",
            max_over(&|p| p.p.column_iter().map(|c| c.norm()).fold(0.0, f64::max)),
        ),
    ];
    for (name, v) in norm_measured {
        checks.push(BoundCheck::new(
            format!("norm.{name}"),
            v,
            analytic.norm(name).unwrap(),
            true,
        ));
    }

    // kernel spectrum and its twelve addends
    let mut lam_min = f64::INFINITY;
    let mut lam_max = f64::NEG_INFINITY;
    let mut term_max = [0.0f64; 12];
    for p in &probes {
        let spec = spectral(&curvature_kernel(&p.state, inst));
        lam_min = lam_min.min(spec.min);
        lam_max = lam_max.max(spec.max);
        for (k, t) in b_terms(&p.state, inst).iter().enumerate() {
            term_max[k] = term_max[k].max(spectral_norm(t));
        }
    }
    checks.push(BoundCheck::new(
        "psd.B".to_string(),
        lam_min.abs().max(lam_max.abs()),
        analytic.psd_bound,
        true,
    ));
    for (k, v) in term_max.iter().enumerate() {
        let name = format!("B{}", k + 1);
        checks.push(BoundCheck::new(
            format!("term.{name}"),
            *v,
            analytic.term(&name).unwrap(),
            false,
        ));
    }

    // pairwise Lipschitz ratios
    let mut pairs_used = 0;
    if probes.len() >= 2 {
        let names = [
            "u",
            "alpha",
            "alpha_inv",
            "f",
            "c",
            "Q2",
            "q2",
            "g",
            "p",
            "G1",
            "G2",
            "G3",
            "G4",
            "G5",
            "G6",
            "hessian",
        ];
        let mut worst = vec![0.0f64; names.len()];
        for i in 0..probes.len() {
            for j in (i + 1)..probes.len() {
                let (a, b) = (&probes[i], &probes[j]);
                let dist = (&a.x - &b.x).norm();
                if dist == 0.0 {
                    continue;
                }
                pairs_used += 1;
                for (slot, v) in worst.iter_mut().zip(lipschitz_ratios(a, b, dist)) {
                    *slot = slot.max(v);
                }
            }
        }
        for (name, v) in names.iter().zip(worst) {
            checks.push(BoundCheck::new(
                format!("lip.{name}"),
                v,
                analytic.lipschitz(name).unwrap(),
                true,
            ));
        }
    }

    Ok(BoundReport {
        schema_version: SCHEMA_VERSION,
        analytic,
        points_used: probes.len(),
        points_excluded: excluded,
        pairs_used,
        b_lambda_min: lam_min,
        b_lambda_max: lam_max,
        checks,
    })
}

fn lipschitz_ratios(a: &PointProbe, b: &PointProbe, dist: f64) -> Vec<f64> {
    let alpha_a = a.state.log_alpha.exp();
    let alpha_b = b.state.log_alpha.exp();
    let mut out = vec![
        (&a.state.u - &b.state.u).norm(),
        (alpha_a - alpha_b).abs(),
        (1.0 / alpha_a - 1.0 / alpha_b).abs(),
        (&a.state.f - &b.state.f).norm(),
        (&a.state.c - &b.state.c).norm(),
        spectral_norm(&(&a.q2_mat - &b.q2_mat)),
        (&a.q2 - &b.q2).norm(),
        (&a.grad_l - &b.grad_l).norm(),
        (&a.p - &b.p).column_iter().map(|c| c.norm()).fold(0.0, f64::max),
    ];
    for k in 0..6 {
        out.push((&a.entries.g[k] - &b.entries.g[k]).amax());
    }
    out.push(spectral(&(&a.h_l - &b.h_l)).abs_max());
    out.iter_mut().for_each(|v| *v /= dist);
    out
}

/// Measured Hessian-Lipschitz constant: the largest
/// `||H_L(x) - H_L(y)|| / ||x - y||` over all pairs of `points`.
pub fn probe_hessian_lipschitz(inst: &ProblemInstance, points: &[DVector<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InsufficientPoints(
            "Lipschitz probe needs at least two points".to_string(),
        ));
    }
    let hs = points
        .iter()
        .map(|x| Ok(entry_terms(&eval_forward(inst, x)?, inst).sum()))
        .collect::<Result<Vec<_>>>()?;
    let mut worst = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let dist = (&points[i] - &points[j]).norm();
            if dist > 0.0 {
                worst = worst.max(spectral(&(&hs[i] - &hs[j])).abs_max() / dist);
            }
        }
    }
    Ok(worst)
}
