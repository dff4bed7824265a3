//! Closed-form second derivatives.
//!
//! Two assembly routes are provided and cross-checked in tests:
//!
//! * the per-entry route, summing six scalar contributions `G1..G6` for
//!   every pair `(i, j)` of input coordinates;
//! * the factored route `A1^T B(x) A1`, with the `n x n` curvature kernel
//!
//! ```text
//! B = J K J + J S J + T
//! J = diag(f) - f f^T
//! K = Q2^T Q2
//! S = A2^T diag(c o h''(A2 f)) A2
//! T = diag(f o q) - <q,f> diag(f) - diag(f) q f^T - f q^T diag(f) + 2 <q,f> f f^T
//! ```
//!
//! where `q = q2 = Q2^T c`. `T` is the Hessian of `z -> <q, softmax(z)>`.
//! Expanding the products gives the twelve addends returned by [`b_terms`].

use nalgebra::{DMatrix, DVector};

use crate::derivatives::{eval_p, eval_q2};
use crate::error::{Error, Result};
use crate::linalg::weighted_gram;
use crate::model::{ModelState, ProblemInstance};

/// Above this `n` the kernel `B` is not materialized unless asked for.
pub const DENSE_KERNEL_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelMode {
    /// Materialize `B` when `n <= DENSE_KERNEL_LIMIT`.
    #[default]
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HessianOptions {
    pub kernel: KernelMode,
    /// Also return the twelve addends of `B` (implies a materialized kernel).
    pub with_terms: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianBundle {
    pub b: Option<DMatrix<f64>>,
    pub terms: Option<Vec<DMatrix<f64>>>,
    pub h_l: DMatrix<f64>,
    pub h_tot: DMatrix<f64>,
    pub w2_diag: DVector<f64>,
}

impl HessianBundle {
    /// Frobenius norms of `B1..B12`, when the addends were requested.
    pub fn term_norms_json(&self) -> Option<serde_json::Value> {
        let terms = self.terms.as_ref()?;
        let map: serde_json::Map<String, serde_json::Value> = terms
            .iter()
            .enumerate()
            .map(|(k, t)| (format!("B{}", k + 1), serde_json::Value::from(t.norm())))
            .collect();
        Some(serde_json::Value::Object(map))
    }
}

/// Signed per-entry contributions to `d^2 L / dx_i dx_j`; their sum is `H_L`.
///
/// `g4` and `g5` already carry their negative sign, and `g5` is the
/// symmetrized cross term `-(<c, Q2 (f o a_j)> <f, a_i> + <c, Q2 (f o a_i)> <f, a_j>)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryTerms {
    pub g: [DMatrix<f64>; 6],
}

impl EntryTerms {
    /// `sum_k ||G_k||_F`, the scale of rounding error in [`EntryTerms::sum`].
    pub fn magnitude(&self) -> f64 {
        self.g.iter().map(|g| g.norm()).sum()
    }

    pub fn sum(&self) -> DMatrix<f64> {
        let mut out = self.g[0].clone();
        for t in &self.g[1..] {
            out += t;
        }
        out
    }
}

/// Second derivative of the softmax output, `d^2 f / dx_i dx_j` (0-based indices).
pub fn hess_f_pair(state: &ModelState, inst: &ProblemInstance, i: usize, j: usize) -> Result<DVector<f64>> {
    let d = inst.d();
    for idx in [i, j] {
        if idx >= d {
            return Err(Error::IndexOutOfRange { index: idx, dim: d });
        }
    }
    let f = &state.f;
    let ai = inst.a1().column(i);
    let aj = inst.a1().column(j);
    let fi = f.dot(&ai);
    let fj = f.dot(&aj);
    let fij: f64 = (0..inst.n()).map(|l| f[l] * ai[l] * aj[l]).sum();
    Ok(DVector::from_fn(inst.n(), |l, _| {
        2.0 * fi * fj * f[l] - fij * f[l] - fj * f[l] * ai[l] - fi * f[l] * aj[l] + ai[l] * f[l] * aj[l]
    }))
}

/// Per-entry assembly of `H_L`, returned as its six signed contributions.
pub fn entry_terms(state: &ModelState, inst: &ProblemInstance) -> EntryTerms {
    let d = inst.d();
    let n = inst.n();
    let m = inst.m();
    let f = &state.f;
    let a1 = inst.a1();
    let p = eval_p(state, inst);
    let (q2_mat, q) = eval_q2(state, inst);

    let v = inst.a2() * &p;
    let qp = &q2_mat * &p;
    let curv = state.c.component_mul(&state.hdoubleprime);
    let s = q.dot(f);
    let phi = a1.tr_mul(f);
    let fq = f.component_mul(&q);
    let xi = a1.tr_mul(&fq);

    let mut g: [DMatrix<f64>; 6] = std::array::from_fn(|_| DMatrix::zeros(d, d));
    for i in 0..d {
        for j in i..d {
            let g1: f64 = (0..m).map(|k| qp[(k, j)] * qp[(k, i)]).sum();
            let g2: f64 = (0..m).map(|k| curv[k] * v[(k, j)] * v[(k, i)]).sum();
            let g3 = 2.0 * s * phi[i] * phi[j];
            let g4 = -s * (0..n).map(|l| f[l] * a1[(l, i)] * a1[(l, j)]).sum::<f64>();
            let g5 = -(xi[j] * phi[i] + xi[i] * phi[j]);
            let g6: f64 = (0..n).map(|l| a1[(l, i)] * fq[l] * a1[(l, j)]).sum();
            for (t, val) in g.iter_mut().zip([g1, g2, g3, g4, g5, g6]) {
                t[(i, j)] = val;
                t[(j, i)] = val;
            }
        }
    }
    EntryTerms { g }
}

fn kernel_pieces(state: &ModelState, inst: &ProblemInstance) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let (q2_mat, q) = eval_q2(state, inst);
    let k = q2_mat.tr_mul(&q2_mat);
    let curv: Vec<f64> = state
        .c
        .iter()
        .zip(state.hdoubleprime.iter())
        .map(|(c, h)| c * h)
        .collect();
    let s = weighted_gram(inst.a2(), &curv);
    (k, s, q)
}

/// The curvature kernel `B(x)` with `d^2 L/dx^2 = A1^T B A1`.
pub fn curvature_kernel(state: &ModelState, inst: &ProblemInstance) -> DMatrix<f64> {
    let n = inst.n();
    let f = &state.f;
    let (k, s, q) = kernel_pieces(state, inst);
    let j = DMatrix::from_diagonal(f) - f * f.transpose();
    let qf = q.dot(f);
    let mut t = DMatrix::from_fn(n, n, |a, b| {
        -f[a] * q[a] * f[b] - f[a] * q[b] * f[b] + 2.0 * qf * f[a] * f[b]
    });
    for l in 0..n {
        t[(l, l)] += f[l] * q[l] - qf * f[l];
    }
    &j * (k + s) * &j + t
}

/// The twelve addends of `B(x)`, in the order
/// `B1 = F K F`, `B2 = -F K f f^T`, `B3 = B2^T`, `B4 = (f^T K f) f f^T`,
/// `B5 = 2 <q,f> f f^T`, `B6 = -(F q f^T + f q^T F)`, `B7 = diag(f o q)`,
/// `B8 = F S F`, `B9 = -F S f f^T`, `B10 = B9^T`, `B11 = (f^T S f) f f^T`,
/// `B12 = -<q,f> F`, with `F = diag(f)`.
pub fn b_terms(state: &ModelState, inst: &ProblemInstance) -> Vec<DMatrix<f64>> {
    let n = inst.n();
    let f = &state.f;
    let (k, s, q) = kernel_pieces(state, inst);
    let kf = &k * f;
    let sf = &s * f;
    let fkf = f.dot(&kf);
    let fsf = f.dot(&sf);
    let qf = q.dot(f);

    let b1 = DMatrix::from_fn(n, n, |a, b| f[a] * k[(a, b)] * f[b]);
    let b2 = DMatrix::from_fn(n, n, |a, b| -f[a] * kf[a] * f[b]);
    let b3 = b2.transpose();
    let b4 = DMatrix::from_fn(n, n, |a, b| fkf * f[a] * f[b]);
    let b5 = DMatrix::from_fn(n, n, |a, b| 2.0 * qf * f[a] * f[b]);
    let b6 = DMatrix::from_fn(n, n, |a, b| -(f[a] * q[a] * f[b] + f[a] * q[b] * f[b]));
    let b7 = DMatrix::from_diagonal(&f.component_mul(&q));
    let b8 = DMatrix::from_fn(n, n, |a, b| f[a] * s[(a, b)] * f[b]);
    let b9 = DMatrix::from_fn(n, n, |a, b| -f[a] * sf[a] * f[b]);
    let b10 = b9.transpose();
    let b11 = DMatrix::from_fn(n, n, |a, b| fsf * f[a] * f[b]);
    let b12 = DMatrix::from_diagonal(&(f * -qf));
    vec![b1, b2, b3, b4, b5, b6, b7, b8, b9, b10, b11, b12]
}

/// Diagonal of `B(x)` in `O(nm)` without forming the kernel.
pub fn b_diagonal(state: &ModelState, inst: &ProblemInstance) -> DVector<f64> {
    let n = inst.n();
    let m = inst.m();
    let f = &state.f;
    let a2 = inst.a2();
    let (q2_mat, q) = eval_q2(state, inst);
    let q2f = &q2_mat * f;
    let curv = state.c.component_mul(&state.hdoubleprime);
    let qf = q.dot(f);
    DVector::from_fn(n, |l, _| {
        let fl = f[l];
        let mut first = 0.0;
        let mut second = 0.0;
        for k in 0..m {
            let e1 = q2_mat[(k, l)] - q2f[k];
            first += e1 * e1;
            let e2 = a2[(k, l)] - state.a2f[k];
            second += curv[k] * e2 * e2;
        }
        fl * fl * (first + second) + fl * q[l] - qf * fl - 2.0 * fl * fl * q[l] + 2.0 * qf * fl * fl
    })
}

/// `A1^T B A1`.
pub fn factored_hessian(inst: &ProblemInstance, b: &DMatrix<f64>) -> DMatrix<f64> {
    inst.a1().tr_mul(&(b * inst.a1()))
}

/// Hessian of the regularizer, `A1^T diag(w^2) A1`.
pub fn reg_hessian(inst: &ProblemInstance) -> DMatrix<f64> {
    let w2: Vec<f64> = inst.w2().iter().cloned().collect();
    weighted_gram(inst.a1(), &w2)
}

pub fn hess_l(state: &ModelState, inst: &ProblemInstance, opts: HessianOptions) -> HessianBundle {
    let h_l = entry_terms(state, inst).sum();
    let materialize = opts.with_terms
        || match opts.kernel {
            KernelMode::Always => true,
            KernelMode::Never => false,
            KernelMode::Auto => inst.n() <= DENSE_KERNEL_LIMIT,
        };
    let b = materialize.then(|| curvature_kernel(state, inst));
    let terms = opts.with_terms.then(|| b_terms(state, inst));
    let h_tot = &h_l + reg_hessian(inst);
    HessianBundle {
        b,
        terms,
        h_l,
        h_tot,
        w2_diag: inst.w2(),
    }
}

/// Total Hessian `H_L + A1^T W^2 A1` via the per-entry route, no kernel.
pub fn hess_tot(state: &ModelState, inst: &ProblemInstance) -> DMatrix<f64> {
    entry_terms(state, inst).sum() + reg_hessian(inst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::linalg::max_abs;
    use crate::model::eval_forward;
    use nalgebra::{dmatrix, dvector};

    fn inst(kind: ActivationKind) -> ProblemInstance {
        ProblemInstance::new(
            dmatrix![0.9, -0.2, 0.1; -0.3, 0.4, 0.2; 0.5, 0.6, -0.4; -0.7, 0.1, 0.3],
            dmatrix![0.6, -0.1, 0.3, 0.2; 0.0, 0.5, -0.4, 0.1],
            dvector![0.3, -0.2],
            dvector![1.0, 0.5, 2.0, 1.5],
            kind,
            2.0,
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn routes_and_terms_agree() {
        for kind in ActivationKind::ALL {
            let inst = inst(kind);
            let st = eval_forward(&inst, &dvector![0.8, -1.3, 0.4]).unwrap();
            let bundle = hess_l(
                &st,
                &inst,
                HessianOptions {
                    kernel: KernelMode::Always,
                    with_terms: true,
                },
            );
            let b = bundle.b.as_ref().unwrap();
            assert!(max_abs(&(factored_hessian(&inst, b) - &bundle.h_l)) <= 1e-10, "{kind}");
            let summed = bundle
                .terms
                .as_ref()
                .unwrap()
                .iter()
                .fold(DMatrix::zeros(4, 4), |acc, t| acc + t);
            assert!(max_abs(&(summed - b)) <= 1e-10);
            let diag = b_diagonal(&st, &inst);
            assert!((diag - b.diagonal()).amax() <= 1e-12);
            assert!(max_abs(&(&bundle.h_l - bundle.h_l.transpose())) <= 1e-10);
            assert!(max_abs(&(&bundle.h_tot - &bundle.h_l - reg_hessian(&inst))) <= 1e-12);
        }
    }

    #[test]
    fn per_entry_third_term_matches_hess_f_pair() {
        let inst = inst(ActivationKind::Sigmoid);
        let st = eval_forward(&inst, &dvector![0.2, 0.7, -0.5]).unwrap();
        let terms = entry_terms(&st, &inst);
        let (_, q) = eval_q2(&st, &inst);
        for i in 0..3 {
            for j in 0..3 {
                let third: f64 = (2..6).map(|k| terms.g[k][(i, j)]).sum();
                let direct = q.dot(&hess_f_pair(&st, &inst, i, j).unwrap());
                assert!((third - direct).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn hess_f_pair_rejects_bad_index() {
        let inst = inst(ActivationKind::Tanh);
        let st = eval_forward(&inst, &dvector![0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            hess_f_pair(&st, &inst, 0, 3),
            Err(Error::IndexOutOfRange { index: 3, dim: 3 })
        ));
    }

    #[test]
    fn single_row_terms_cancel() {
        let inst = ProblemInstance::new(
            dmatrix![0.3, -0.8],
            dmatrix![1.0],
            dvector![0.5],
            dvector![1.0],
            ActivationKind::Tanh,
            1.0,
            0.05,
        )
        .unwrap();
        let st = eval_forward(&inst, &dvector![1.0, 1.0]).unwrap();
        assert!(hess_f_pair(&st, &inst, 0, 1).unwrap()[0].abs() <= 1e-16);
        let terms = b_terms(&st, &inst);
        assert_eq!(terms.len(), 12);
        let total: f64 = terms.iter().map(|t| t[(0, 0)]).sum();
        assert!(total.abs() <= 1e-15);
    }

    #[test]
    fn zero_residual_identity_keeps_only_gauss_newton_block() {
        let base = inst(ActivationKind::Identity);
        let x = dvector![0.1, 0.2, -0.3];
        let st = eval_forward(&base, &x).unwrap();
        let inst = base.with_b(st.hval.clone()).unwrap();
        let st = eval_forward(&inst, &x).unwrap();
        let terms = b_terms(&st, &inst);
        for t in &terms[4..] {
            assert!(max_abs(t) == 0.0);
        }
        let f = &st.f;
        let j = DMatrix::from_diagonal(f) - f * f.transpose();
        let k = inst.a2().tr_mul(inst.a2());
        let expected = &j * k * &j;
        let bundle = hess_l(&st, &inst, HessianOptions::default());
        assert!(max_abs(&(bundle.b.unwrap() - expected)) <= 1e-15);
    }

    #[test]
    fn kernel_mode_never_skips_materialization() {
        let inst = inst(ActivationKind::Tanh);
        let st = eval_forward(&inst, &dvector![0.0, 0.0, 0.0]).unwrap();
        let bundle = hess_l(
            &st,
            &inst,
            HessianOptions {
                kernel: KernelMode::Never,
                with_terms: false,
            },
        );
        assert!(bundle.b.is_none());
        assert!(bundle.term_norms_json().is_none());
    }
}
