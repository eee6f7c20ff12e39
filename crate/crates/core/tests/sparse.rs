mod common;

use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use quasipot::sparse::{build_constraints, library_subset_mask, sr3_solve, ConstraintSet, PolynomialLibrary, Sr3Config};

fn coeffs(q: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, q)
}

proptest! {
    #[test]
    fn transform_is_linear(a in -2.0..2.0f64, b in -2.0..2.0f64, x1 in coeffs(35), x2 in coeffs(35)) {
        let lib = PolynomialLibrary::new(3, 4);
        let (x1, x2) = (Array1::from(x1), Array1::from(x2));
        let lhs = lib.gradient_transform((&x1 * a + &x2 * b).view()).unwrap();
        let rhs = lib.gradient_transform(x1.view()).unwrap() * a + lib.gradient_transform(x2.view()).unwrap() * b;
        prop_assert!((&lhs - &rhs).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn support_is_globally_optimal_for_small_libraries(seed in 0u64..1000) {
        // the potential column of a d = 2, degree 2 library (q = 6): all 64 supports
        let p = common::sparse_problem(seed, 2, 2, 50, 1e-3);
        let lambda = 1e-2;
        let theta = p.theta.view();
        let g = p.targets.column(2).insert_axis(Axis(1)).to_owned();
        let cfg = Sr3Config { lambda, nu: 1.0, ..Default::default() };
        let res = sr3_solve(theta, g.view(), &ConstraintSet::unconstrained(6, 1), &cfg, Array2::zeros((6, 1)).view()).unwrap();
        let penalized = |xi: &Array2<f64>| {
            let r = &g - &theta.dot(xi);
            0.5 * r.iter().map(|v| v * v).sum::<f64>() + lambda * xi.iter().filter(|v| **v != 0.0).count() as f64
        };
        let ours = penalized(&res.xi);
        for mask_bits in 0u32..64 {
            let mask = Array2::from_shape_fn((6, 1), |(k, _)| mask_bits & (1 << k) != 0);
            let ls = Sr3Config { lambda: 0.0, nu: 1.0, sparsity_mask: Some(mask), ..Default::default() };
            let fit = sr3_solve(theta, g.view(), &ConstraintSet::unconstrained(6, 1), &ls, Array2::zeros((6, 1)).view()).unwrap();
            prop_assert!(ours <= penalized(&fit.xi) + 1e-9, "support {mask_bits:06b} beats the solver");
        }
    }
}

#[test]
fn synthetic_recovery_three_dimensional() {
    for seed in 0..3 {
        let p = common::sparse_problem(seed, 3, 5, 2000, 1e-6);
        let r = common::recover(&p);
        assert!(r.support_exact, "seed {seed}");
        assert!(r.max_coef_error < 1e-4, "seed {seed}: {}", r.max_coef_error);
    }
}

#[test]
fn objective_decreases_in_the_relaxed_regime() {
    let p = common::sparse_problem(7, 2, 4, 500, 1e-3);
    let lib = &p.lib;
    let mask = library_subset_mask(lib, 4, 3);
    let cons = build_constraints(lib, None).unwrap();
    let cfg = Sr3Config {
        lambda: 0.05,
        nu: 1e-3,
        sparsity_mask: Some(mask.clone()),
        free_columns: vec![0, 1],
        ..Default::default()
    };
    let res = sr3_solve(p.theta.view(), p.targets.view(), &cons, &cfg, Array2::zeros(p.truth.xi.dim()).view()).unwrap();
    assert!(res.objective.len() > 1);
    for w in res.objective.windows(2) {
        assert!(w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
    }
    assert!(cons.residual(res.xi.view()).unwrap() < 1e-8);
    for ((k, c), keep) in mask.indexed_iter() {
        if !keep {
            assert_eq!(res.xi[[k, c]], 0.0);
        }
    }
}

