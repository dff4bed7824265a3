//! Closed-form first derivatives of the softmax regression loss.

use crate::model::{rows_of, ModelState, ProblemInstance};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// `n x d`; column `i` is `df/dx_i`.
    pub p: DMatrix<f64>,
    /// `diag(h'(A2 f)) A2`, `m x n`.
    pub q2_mat: DMatrix<f64>,
    /// `Q2^T c`, length `n`.
    pub q2: DVector<f64>,
    pub grad_l: DVector<f64>,
    pub grad_reg: DVector<f64>,
    pub grad_tot: DVector<f64>,
}

impl GradientBundle {
    /// Diagnostic dump with matrices as row-major nested arrays.
    pub fn to_json_value(&self) -> serde_json::Value {
        let v = |x: &DVector<f64>| x.iter().cloned().collect::<Vec<_>>();
        serde_json::json!({
            "P": rows_of(&self.p),
            "Q2": rows_of(&self.q2_mat),
            "q2": v(&self.q2),
            "grad_L": v(&self.grad_l),
            "grad_reg": v(&self.grad_reg),
            "grad_tot": v(&self.grad_tot),
        })
    }
}

/// Softmax Jacobian `(diag(f) - f f^T) A1`.
///
/// Column `i` is `f o A1[:, i] - <f, A1[:, i]> f`.
pub fn eval_p(state: &ModelState, inst: &ProblemInstance) -> DMatrix<f64> {
    let f = &state.f;
    let a1 = inst.a1();
    let mut p = DMatrix::zeros(inst.n(), inst.d());
    for (i, col) in a1.column_iter().enumerate() {
        let mean = f.dot(&col);
        for l in 0..inst.n() {
            p[(l, i)] = f[l] * col[l] - mean * f[l];
        }
    }
    p
}

/// `Q2 = diag(h'(A2 f)) A2` and `q2 = Q2^T c`.
pub fn eval_q2(state: &ModelState, inst: &ProblemInstance) -> (DMatrix<f64>, DVector<f64>) {
    let mut q2_mat = inst.a2().clone();
    for (mut row, &s) in q2_mat.row_iter_mut().zip(state.hprime.iter()) {
        row *= s;
    }
    let q2 = q2_mat.tr_mul(&state.c);
    (q2_mat, q2)
}

/// Gradient of `L` alone: `A1^T (f o q2 - <q2, f> f)`.
pub fn grad_l(state: &ModelState, inst: &ProblemInstance, q2: &DVector<f64>) -> DVector<f64> {
    let f = &state.f;
    let mean = q2.dot(f);
    let inner = DVector::from_fn(inst.n(), |l, _| f[l] * q2[l] - mean * f[l]);
    inst.a1().tr_mul(&inner)
}

/// Gradient of the regularizer: `A1^T diag(w)^2 A1 x`.
pub fn grad_reg(state: &ModelState, inst: &ProblemInstance) -> DVector<f64> {
    let weighted = state.z.component_mul(&inst.w2());
    inst.a1().tr_mul(&weighted)
}

pub fn grad(state: &ModelState, inst: &ProblemInstance) -> GradientBundle {
    let p = eval_p(state, inst);
    let (q2_mat, q2) = eval_q2(state, inst);
    let grad_l = grad_l(state, inst, &q2);
    let grad_reg = grad_reg(state, inst);
    let grad_tot = &grad_l + &grad_reg;
    GradientBundle {
        p,
        q2_mat,
        q2,
        grad_l,
        grad_reg,
        grad_tot,
    }
}

/// Gradient of `L_tot` without materializing `P`.
pub fn grad_tot(state: &ModelState, inst: &ProblemInstance) -> DVector<f64> {
    let (_, q2) = eval_q2(state, inst);
    grad_l(state, inst, &q2) + grad_reg(state, inst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::model::eval_forward;
    use nalgebra::{dmatrix, dvector};

    fn small(kind: ActivationKind, a1: DMatrix<f64>, w: DVector<f64>) -> ProblemInstance {
        let n = a1.nrows();
        let a2 = DMatrix::from_fn(2, n, |k, l| ((k + 2 * l) as f64 * 0.37).sin() * 0.5);
        ProblemInstance::new_relaxed(a1, a2, dvector![0.1, -0.2], w, kind, 3.0, 0.05).unwrap()
    }

    #[test]
    fn zero_a1_gives_zero_jacobian_and_gradient() {
        let inst = small(ActivationKind::Tanh, DMatrix::zeros(3, 2), dvector![1.0, 2.0, 3.0]);
        let st = eval_forward(&inst, &dvector![0.4, -1.0]).unwrap();
        let g = grad(&st, &inst);
        assert!(g.p.iter().all(|&v| v == 0.0));
        assert!(g.grad_tot.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_row_jacobian_vanishes() {
        let inst = ProblemInstance::new(
            dmatrix![0.3, -0.8],
            dmatrix![1.0],
            dvector![0.5],
            dvector![1.0],
            ActivationKind::Sigmoid,
            1.0,
            0.05,
        )
        .unwrap();
        let st = eval_forward(&inst, &dvector![1.0, 1.0]).unwrap();
        assert!(eval_p(&st, &inst).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_activation_gives_q2_equal_a2() {
        let a1 = dmatrix![0.1, 0.2; -0.3, 0.4; 0.5, -0.6];
        let inst = small(ActivationKind::Identity, a1, dvector![1.0, 1.0, 1.0]);
        let st = eval_forward(&inst, &dvector![0.3, -0.2]).unwrap();
        let (q2_mat, _) = eval_q2(&st, &inst);
        assert_eq!(&q2_mat, inst.a2());
    }

    #[test]
    fn zero_residual_and_zero_weights_are_stationary() {
        let a1 = dmatrix![0.1, 0.2; -0.3, 0.4; 0.5, -0.6];
        let inst = small(ActivationKind::Tanh, a1, DVector::zeros(3));
        let x = dvector![0.3, -0.2];
        let st = eval_forward(&inst, &x).unwrap();
        let inst = inst.with_b(st.hval.clone()).unwrap();
        let st = eval_forward(&inst, &x).unwrap();
        let g = grad(&st, &inst);
        assert!(g.q2.iter().all(|&v| v == 0.0));
        assert!(g.grad_tot.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_columns_sum_to_zero_and_chain_routes_agree() {
        let a1 = dmatrix![0.9, -0.2; -0.3, 0.4; 0.5, 0.6; -0.7, 0.1];
        let inst = small(ActivationKind::Softplus, a1, dvector![1.0, 0.5, 2.0, 1.5]);
        let st = eval_forward(&inst, &dvector![0.8, -1.3]).unwrap();
        let g = grad(&st, &inst);
        for col in g.p.column_iter() {
            assert!(col.sum().abs() <= 1e-10);
        }
        let via_p = g.p.tr_mul(&g.q2);
        assert!((via_p - &g.grad_l).amax() <= 1e-12);
        assert_eq!(g.grad_tot, &g.grad_l + &g.grad_reg);
    }
}
