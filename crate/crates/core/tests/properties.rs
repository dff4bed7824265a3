mod common;

use common::random_instance;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use softnewton::bounds::{compute_constants, constants_for, BoundParams, Magnitude};
use softnewton::derivatives::{eval_q2, grad, grad_l};
use softnewton::harness::route_error;
use softnewton::hessian::{curvature_kernel, entry_terms, factored_hessian};
use softnewton::linalg::{relative_frobenius, relative_l2};
use softnewton::oracle::{fd_gradient, fd_hessian, spectral, FdConfig};
use softnewton::sketch::subsample_with;
use softnewton::{eval_forward, ActivationKind, ProblemInstance};

fn point(inst: &ProblemInstance, raw: &[f64]) -> DVector<f64> {
    let x = DVector::from_fn(inst.d(), |i, _| raw[i]);
    let norm = x.norm();
    if norm > inst.r() {
        x * (inst.r() / norm)
    } else {
        x
    }
}

fn without_weights(inst: &ProblemInstance) -> ProblemInstance {
    ProblemInstance::new_relaxed(
        inst.a1().clone(),
        inst.a2().clone(),
        inst.b().clone(),
        DVector::zeros(inst.n()),
        inst.activation().kind,
        inst.r(),
        inst.beta(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>(), raw in prop::collection::vec(-2.0f64..2.0, 10)) {
        let inst = random_instance(seed);
        let x = point(&inst, &raw);
        for inst in [inst.clone(), without_weights(&inst)] {
            let st = eval_forward(&inst, &x).unwrap();
            let g = grad(&st, &inst).grad_tot;
            let fd = fd_gradient(|y| Ok(eval_forward(&inst, y)?.loss_tot), &x, &FdConfig::default()).unwrap();
            let err = relative_l2(&g, &fd);
            prop_assert!(err <= 1e-6 || (&g - &fd).norm() <= 1e-9, "relative error {err}");
        }
    }

    #[test]
    fn hessian_matches_differentiated_gradient(seed in any::<u64>(), raw in prop::collection::vec(-2.0f64..2.0, 10)) {
        let inst = without_weights(&random_instance(seed));
        let x = point(&inst, &raw);
        let st = eval_forward(&inst, &x).unwrap();
        let terms = entry_terms(&st, &inst);
        let h = terms.sum();
        let fd = fd_hessian(
            |y| {
                let s = eval_forward(&inst, y)?;
                let (_, q2) = eval_q2(&s, &inst);
                Ok(grad_l(&s, &inst, &q2))
            },
            &x,
            &FdConfig::default(),
        )
        .unwrap();
        let err = relative_frobenius(&h, &fd.matrix);
        prop_assert!(err <= 1e-5 || (&h - &fd.matrix).norm() <= 1e-9, "relative error {err}");
        prop_assert_eq!(h.clone(), h.transpose());
        let fact = factored_hessian(&inst, &curvature_kernel(&st, &inst));
        prop_assert!(route_error(&fact, &h, terms.magnitude()) <= 1e-10);
    }

    #[test]
    fn softmax_is_a_probability_vector(seed in any::<u64>(), raw in prop::collection::vec(-1e3f64..1e3, 10)) {
        let inst = random_instance(seed);
        let x = DVector::from_fn(inst.d(), |i, _| raw[i]);
        let st = eval_forward(&inst, &x).unwrap();
        prop_assert!(st.f.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((st.f.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(st.log_alpha.is_finite());
    }

    #[test]
    fn softmax_ignores_common_shift(raw in prop::collection::vec(-1.0f64..1.0, 12), t in -50.0f64..50.0) {
        // last column of A1 is constant, so moving x along it shifts every logit equally
        let a1 = DMatrix::from_fn(4, 3, |i, j| if j == 2 { 0.25 } else { raw[i * 2 + j] * 0.4 });
        let a2 = DMatrix::from_fn(2, 4, |i, j| raw[4 + i * 4 + j] * 0.3);
        let inst = ProblemInstance::new(a1, a2, DVector::zeros(2), DVector::from_element(4, 1.0), ActivationKind::Sigmoid, 1.5, 0.05).unwrap();
        let x = DVector::from_vec(vec![raw[0], raw[1], 0.0]);
        let mut y = x.clone();
        y[2] += t;
        let fx = eval_forward(&inst, &x).unwrap().f;
        let fy = eval_forward(&inst, &y).unwrap().f;
        prop_assert!((fx - fy).amax() <= 1e-14);
    }

    #[test]
    fn residual_gradient_obeys_norm_bound(seed in any::<u64>(), raw in prop::collection::vec(-2.0f64..2.0, 10)) {
        let inst = random_instance(seed);
        let x = point(&inst, &raw);
        let st = eval_forward(&inst, &x).unwrap();
        let c = compute_constants(&inst);
        let (_, q2) = eval_q2(&st, &inst);
        prop_assert!(c.norm("q2").unwrap().dominates(q2.norm()));
        prop_assert!(c.norm("c").unwrap().dominates(st.c.norm()));
    }

    #[test]
    fn kernel_within_psd_bound_everywhere(seed in any::<u64>(), raw in prop::collection::vec(-5.0f64..5.0, 10)) {
        let inst = random_instance(seed);
        let x = DVector::from_fn(inst.d(), |i, _| raw[i]);
        let st = eval_forward(&inst, &x).unwrap();
        let spec = spectral(&curvature_kernel(&st, &inst));
        prop_assert!(compute_constants(&inst).psd_bound.dominates(spec.abs_max()));
    }

    #[test]
    fn sketch_weights_are_sparse_and_nonnegative(seed in any::<u64>(), n in 20usize..200, c in 0.01f64..1.0) {
        let a = DMatrix::from_fn(n, 3, |i, j| ((i * 31 + j * 17) as f64 + seed as f64 * 1e-3).sin());
        let dw = DVector::from_fn(n, |i, _| 0.5 + (i % 7) as f64);
        let r = subsample_with(&a, &dw, 0.3, 0.1, seed, c).unwrap();
        prop_assert!(r.kept.iter().all(|k| k.weight >= 0.0 && k.index < n));
        prop_assert!(r.distinct_rows() <= r.samples.min(n));
        prop_assert_eq!(r.kept.iter().map(|k| k.count as usize).sum::<usize>(), if r.exact { n } else { r.samples });
    }

    #[test]
    fn instance_json_round_trip_is_bit_exact(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let back = ProblemInstance::from_json(&inst.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, inst);
    }

    #[test]
    fn magnitude_products_match_floating_point(a in 1e-3f64..1e3, b in 1e-3f64..1e3, k in -3.0f64..3.0) {
        let m = Magnitude::new(a) * Magnitude::new(b);
        prop_assert!((m.value() - a * b).abs() <= 1e-12 * a * b);
        prop_assert!((Magnitude::new(a).powf(k).value() - a.powf(k)).abs() <= 1e-11 * a.powf(k));
    }

    #[test]
    fn constants_are_finite_in_log_space(n in 1usize..100_000, r in 0.1f64..40.0, beta in 1e-4f64..0.1) {
        let c = constants_for(BoundParams { n, r, r_h: 2.0, l_h: 1.0, beta });
        prop_assert!(c.m.ln().is_finite() && c.r_f.ln().is_finite());
        prop_assert!(c.lipschitz.iter().all(|b| b.bound.ln().is_finite()));
    }
}
