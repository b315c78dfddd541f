mod common;

use anytime_mpc::feas::{
    armijo_linesearch, newton_step, solve_feasibility, solve_feasibility_traced, FeasOptions, FeasStatus, IterationRecord,
};
use anytime_mpc::problem::{ConvexFunction, FeasibilityProblem, HessianMode};
use common::{ball_outside_halfspace, contradictory_halfspaces, disjoint_boxes, feasible_instance, random_vector, rng};
use nalgebra::{dvector, DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn infeasible_instances_are_reported_empty() {
    let mut rng = rng(21);
    let opts = FeasOptions::default();
    for i in 0..60 {
        let p = match i % 3 {
            0 => disjoint_boxes(&mut rng),
            1 => contradictory_halfspaces(&mut rng),
            _ => ball_outside_halfspace(&mut rng),
        };
        let x0 = random_vector(&mut rng, p.dim(), -5.0, 5.0);
        let out = solve_feasibility(&p, &x0, &opts).unwrap();
        assert_eq!(out.status, FeasStatus::Empty, "instance {i}: {out:?}");
        assert!(out.gradient_norm <= opts.eps_grad);
        assert!(out.merit > opts.eps_feas * opts.eps_feas / 2.0);
    }
}

#[test]
fn feasible_instances_are_solved() {
    let mut rng = rng(22);
    let opts = FeasOptions::default();
    for i in 0..60 {
        let (p, _) = feasible_instance(&mut rng);
        let x0 = random_vector(&mut rng, p.dim(), -5.0, 5.0);
        let out = solve_feasibility(&p, &x0, &opts).unwrap();
        assert_eq!(out.status, FeasStatus::Feasible, "instance {i}: {out:?}");
        assert!(p.max_violation(&out.x).unwrap() <= 1e-8);
    }
}

#[test]
fn symmetric_infeasible_pair_stops_at_midpoint() {
    let p = FeasibilityProblem::new(
        1,
        vec![ConvexFunction::linear(dvector![1.0], 1.0), ConvexFunction::linear(dvector![-1.0], 1.0)],
        vec![],
    )
    .unwrap();
    let out = solve_feasibility(&p, &dvector![5.0], &FeasOptions::default()).unwrap();
    assert_eq!(out.status, FeasStatus::Empty);
    assert!(out.x[0].abs() < 1e-9);
    assert!((out.merit - 1.0).abs() < 1e-9);
}

#[test]
fn newton_step_scalar_example_and_residual() {
    let p = FeasibilityProblem::new(1, vec![ConvexFunction::linear(dvector![1.0], -2.0)], vec![]).unwrap();
    let x = dvector![3.0];
    let d = newton_step(&p, &x, &p.active_set(&x).unwrap(), 0.5, HessianMode::Full).unwrap();
    assert!((d[0] + 2.0 / 3.0).abs() < 1e-15);

    let mut rng = rng(23);
    for _ in 0..50 {
        let (p, _) = feasible_instance(&mut rng);
        let x = random_vector(&mut rng, p.dim(), -5.0, 5.0);
        let g = p.eval_merit_gradient(&x).unwrap();
        if g.norm() == 0.0 {
            continue;
        }
        let d = newton_step(&p, &x, &p.active_set(&x).unwrap(), 0.5, HessianMode::Full).unwrap();
        let h = p.eval_generalized_hessian(&x, HessianMode::Full).unwrap() + DMatrix::identity(p.dim(), p.dim()) * (0.5 * g.norm());
        assert!((h * &d + &g).norm() <= 1e-10 * g.norm());
        assert!(g.dot(&d) < 0.0);
    }
}

#[test]
fn armijo_hand_example() {
    // F(x) = ½x² from the single row x ≤ 0.
    let p = FeasibilityProblem::new(1, vec![ConvexFunction::linear(dvector![1.0], 0.0)], vec![]).unwrap();
    assert_eq!(armijo_linesearch(&p, &dvector![1.0], &dvector![-2.0], 0.4).unwrap(), 0.5);
    assert_eq!(armijo_linesearch(&p, &dvector![1.0], &dvector![-1.0], 0.4).unwrap(), 1.0);
}

#[test]
fn armijo_returns_the_largest_admissible_step() {
    let mut rng = rng(24);
    let sigma = 0.1;
    for _ in 0..100 {
        let (p, _) = feasible_instance(&mut rng);
        let x = random_vector(&mut rng, p.dim(), -5.0, 5.0);
        let g = p.eval_merit_gradient(&x).unwrap();
        if g.norm() == 0.0 {
            continue;
        }
        let d = newton_step(&p, &x, &p.active_set(&x).unwrap(), 0.5, HessianMode::Full).unwrap();
        let tau = armijo_linesearch(&p, &x, &d, sigma).unwrap();
        let f = p.eval_merit(&x).unwrap();
        let slope = g.dot(&d);
        let accepts = |t: f64| p.eval_merit(&(&x + &d * t)).unwrap() <= f + sigma * t * slope;
        assert!(accepts(tau));
        assert!(tau == 1.0 || !accepts(2.0 * tau));
    }
}

#[test]
fn interior_start_returns_immediately() {
    let mut rng = rng(25);
    let (p, x_ref) = feasible_instance(&mut rng);
    let p = FeasibilityProblem::new(p.dim(), p.inequalities().to_vec(), vec![]).unwrap();
    let out = solve_feasibility(&p, &x_ref, &FeasOptions::default()).unwrap();
    assert_eq!(out.status, FeasStatus::Feasible);
    assert_eq!(out.iterations, 0);
    assert_eq!(out.x, x_ref);
}

#[test]
fn box_from_far_start() {
    let rows = vec![
        ConvexFunction::linear(dvector![1.0, 0.0], -1.0),
        ConvexFunction::linear(dvector![-1.0, 0.0], -1.0),
        ConvexFunction::linear(dvector![0.0, 1.0], -1.0),
        ConvexFunction::linear(dvector![0.0, -1.0], -1.0),
    ];
    let p = FeasibilityProblem::new(2, rows, vec![]).unwrap();
    let out = solve_feasibility(&p, &dvector![5.0, 5.0], &FeasOptions::default()).unwrap();
    assert_eq!(out.status, FeasStatus::Feasible);
    assert!(out.x.amax() <= 1.0 + 1e-8);
}

fn trace(p: &FeasibilityProblem, x0: &DVector<f64>, opts: &FeasOptions) -> (Vec<IterationRecord>, DVector<f64>) {
    let mut records = Vec::new();
    let mut push = |r: &IterationRecord| records.push(*r);
    let out = solve_feasibility_traced(p, x0, opts, Some(&mut push)).unwrap();
    (records, out.x)
}

#[test]
fn iterates_are_deterministic() {
    let mut rng = rng(26);
    let (p, _) = feasible_instance(&mut rng);
    let x0 = random_vector(&mut rng, p.dim(), -5.0, 5.0);
    let (a, xa) = trace(&p, &x0, &FeasOptions::default());
    let (b, xb) = trace(&p, &x0, &FeasOptions::default());
    assert_eq!(a, b);
    assert_eq!(xa, xb);
}

#[test]
fn local_convergence_is_superlinear_on_smooth_instances() {
    // A disk and a halfspace, intersecting with interior; from outside both.
    let disk = ConvexFunction::centered_quadratic(&DMatrix::identity(2, 2), &dvector![0.0, 0.0], -1.0).unwrap();
    let half = ConvexFunction::linear(dvector![1.0, 1.0], -0.5);
    let p = FeasibilityProblem::new(2, vec![disk, half], vec![]).unwrap();
    let opts = FeasOptions {
        eps_feas: 1e-14,
        ..FeasOptions::default()
    };
    let (records, _) = trace(&p, &dvector![3.0, 2.0], &opts);
    let tail: Vec<f64> = records.iter().rev().take(3).map(|r| r.merit).collect();
    assert_eq!(tail.len(), 3);
    // merit is quadratic in the violation: ratios of successive values shrink
    let (m3, m2, m1) = (tail[2], tail[1], tail[0]);
    assert!(m1 / m2 < m2 / m3 || m1 == 0.0, "merits {m3:e} {m2:e} {m1:e}");
}

proptest! {
    #[test]
    fn merit_strictly_decreases_along_iterates(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (p, _) = feasible_instance(&mut rng);
        let x0 = random_vector(&mut rng, p.dim(), -5.0, 5.0);
        let (records, _) = trace(&p, &x0, &FeasOptions::default());
        for w in records.windows(2) {
            prop_assert!(w[1].merit < w[0].merit);
        }
        for r in &records {
            prop_assert!(r.step > 0.0 && r.step <= 1.0);
        }
    }

    #[test]
    fn regularized_matrix_is_positive_definite(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (p, _) = feasible_instance(&mut rng);
        let x = random_vector(&mut rng, p.dim(), -5.0, 5.0);
        let g = p.eval_merit_gradient(&x).unwrap().norm();
        prop_assume!(g > 0.0);
        for mode in [HessianMode::Full, HessianMode::GaussNewton] {
            let h = p.eval_generalized_hessian(&x, mode).unwrap() + DMatrix::identity(p.dim(), p.dim()) * (0.5 * g);
            let min = h.symmetric_eigen().eigenvalues.min();
            prop_assert!(min >= 0.5 * g - 1e-12 * (1.0 + g));
        }
    }
}
