mod common;

use common::{classify, enumerate_active_sets, random_mlcp, Activity};
use nalgebra::{DMatrix, DVector};
use physfilter::lcp::{
    complementarity_residual, solve_direct, solve_pgs, solve_pgs_traced, DirectOptions, FrictionLink,
    MlcpProblem, PgsOptions,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INF: f64 = f64::INFINITY;

#[test]
fn three_by_three_with_active_lower_bound_matches_enumeration() {
    let h = DMatrix::from_row_slice(3, 3, &[3.0, 0.5, 0.2, 0.5, 2.0, 0.1, 0.2, 0.1, 1.5]);
    // unconstrained solution has y[1] < 0
    let rhs = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let p = MlcpProblem::new(
        h,
        rhs,
        DVector::from_vec(vec![-1.0, 0.0, -1.0]),
        DVector::from_vec(vec![1.0, 1.0, 1.0]),
    )
    .unwrap();
    let oracle = enumerate_active_sets(&p, 1e-12);
    assert_eq!(oracle.len(), 1);
    let (pattern, y_ref) = &oracle[0];
    assert_eq!(pattern[1], Activity::Lower);
    let sol = solve_direct(&p, &DirectOptions::default()).unwrap();
    assert!((&sol.y - y_ref).amax() < 1e-12);
    assert_eq!(&classify(&p, &sol.y, 1e-9), pattern);
}

#[test]
fn clamped_friction_case_has_tiny_residual() {
    let p = MlcpProblem::with_friction(
        DMatrix::identity(2, 2),
        DVector::from_vec(vec![10.0, 7.0]),
        DVector::from_vec(vec![0.0, -INF]),
        DVector::from_vec(vec![INF, INF]),
        vec![FrictionLink { tangent: 1, normal: 0, mu: 0.5 }],
    )
    .unwrap();
    // enumerate the active sets of the clamped problem with bounds fixed at ±mu*10
    let fixed = MlcpProblem::new(
        p.h.clone(),
        p.rhs.clone(),
        DVector::from_vec(vec![0.0, -5.0]),
        DVector::from_vec(vec![INF, 5.0]),
    )
    .unwrap();
    let oracle = enumerate_active_sets(&fixed, 1e-12);
    assert_eq!(oracle.len(), 1);
    assert_eq!(oracle[0].0, vec![Activity::Free, Activity::Upper]);
    for sol in [
        solve_direct(&p, &DirectOptions::default()).unwrap(),
        solve_pgs(&p, &PgsOptions::default()).unwrap(),
    ] {
        assert!((&sol.y - &oracle[0].1).amax() < 1e-9);
        assert!(complementarity_residual(&p, &sol).unwrap() <= 1e-8);
    }
    let exact = solve_direct(&p, &DirectOptions::default()).unwrap();
    assert!(complementarity_residual(&p, &exact).unwrap() <= 1e-10);
}

#[test]
fn direct_and_pgs_agree_with_enumeration_on_random_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let p = random_mlcp(&mut rng, 8);
        let oracle = enumerate_active_sets(&p, 1e-10);
        assert_eq!(oracle.len(), 1, "expected a unique active set");
        let direct = solve_direct(&p, &DirectOptions::default()).unwrap();
        assert!((&direct.y - &oracle[0].1).amax() < 1e-9);
        let pgs = solve_pgs(&p, &PgsOptions::default()).unwrap();
        assert!(pgs.residual <= 1e-8, "pgs residual {}", pgs.residual);
        assert!((&pgs.y - &direct.y).amax() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solved_problems_respect_bounds(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_mlcp(&mut rng, 8);
        let sol = solve_direct(&p, &DirectOptions::default()).unwrap();
        prop_assert!(sol.residual <= 1e-10);
        for i in 0..p.dim() {
            prop_assert!(sol.y[i] >= p.lower[i] - 1e-10);
            prop_assert!(sol.y[i] <= p.upper[i] + 1e-10);
        }
    }

    #[test]
    fn scaling_leaves_unbounded_solution_unchanged(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_mlcp(&mut rng, 6);
        let n = p.dim();
        let open = MlcpProblem::new(
            p.h.clone(), p.rhs.clone(),
            DVector::from_element(n, -INF), DVector::from_element(n, INF),
        ).unwrap();
        let scaled = MlcpProblem::new(
            &p.h * scale, &p.rhs * scale,
            DVector::from_element(n, -INF), DVector::from_element(n, INF),
        ).unwrap();
        let a = solve_direct(&open, &DirectOptions::default()).unwrap();
        let b = solve_direct(&scaled, &DirectOptions::default()).unwrap();
        prop_assert!((&a.y - &b.y).amax() <= 1e-9 * (1.0 + a.y.amax()));
    }

    #[test]
    fn pgs_objective_descends_on_spd_problems(seed in any::<u64>()) {
        // For symmetric positive-definite H with fixed bounds every projected
        // coordinate update decreases 1/2 y'Hy - rhs'y.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let c = DMatrix::from_fn(n, n, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let h = &c * c.transpose() + DMatrix::identity(n, n);
        let rhs = DVector::from_fn(n, |_, _| rand::Rng::random_range(&mut rng, -2.0..2.0));
        let p = MlcpProblem::new(h, rhs, DVector::from_element(n, -0.5), DVector::from_element(n, 0.5)).unwrap();
        let objective = |y: &DVector<f64>| 0.5 * y.dot(&(&p.h * y)) - p.rhs.dot(y);
        let mut prev = f64::INFINITY;
        for sweeps in 1..30 {
            let sol = solve_pgs(&p, &PgsOptions { max_iterations: sweeps, tolerance: 0.0, ..Default::default() }).unwrap();
            let f = objective(&sol.y);
            prop_assert!(f <= prev + 1e-12);
            prev = f;
        }
    }

    #[test]
    fn pgs_reaches_tolerance_with_bounded_trace(seed in any::<u64>()) {
        // the max-norm residual is not monotone sweep to sweep, but it must
        // settle below tolerance and never blow up past its starting level
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let c = DMatrix::from_fn(n, n, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let h = &c * c.transpose() + DMatrix::identity(n, n);
        let rhs = DVector::from_fn(n, |_, _| rand::Rng::random_range(&mut rng, -2.0..2.0));
        let p = MlcpProblem::new(h, rhs, DVector::from_element(n, -0.5), DVector::from_element(n, 0.5)).unwrap();
        let (sol, trace) = solve_pgs_traced(&p, &PgsOptions::default()).unwrap();
        prop_assert!(sol.residual <= 1e-8);
        prop_assert!(*trace.last().unwrap() <= 1e-8);
    }
}
