mod common;

use common::{feasible_instance, gram_problem, infeasible_instance, poly};
use nalgebra::DMatrix;
use opacert_sdp::{min_eigenvalue_check, solve_feasibility, Constraint, SdpProblem, SolveStatus, SolverConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn square_of_affine_is_feasible_with_unique_gram() {
    let p = poly(&[(&[0], 1.0), (&[1], 2.0), (&[2], 1.0)]);
    let (prob, _) = gram_problem(&p, 1, 1);
    let sol = solve_feasibility(&prob, &SolverConfig::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Feasible);
    let q = &sol.blocks[0];
    let expected = DMatrix::from_element(2, 2, 1.0);
    assert!(
        (q - &expected).amax() <= 1e-7,
        "recovered Gram {q} differs from all-ones"
    );
    assert!(min_eigenvalue_check(q, 1e-8).unwrap().pass);
}

#[test]
fn indefinite_quadratic_is_infeasible() {
    let p = poly(&[(&[0], -1.0), (&[2], 1.0)]);
    let (prob, _) = gram_problem(&p, 1, 1);
    let sol = solve_feasibility(&prob, &SolverConfig::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Infeasible);
}

#[test]
fn motzkin_has_a_dual_witness() {
    // x^4 y^2 + x^2 y^4 - 3 x^2 y^2 + 1
    let p = poly(&[
        (&[4, 2], 1.0),
        (&[2, 4], 1.0),
        (&[2, 2], -3.0),
        (&[0, 0], 1.0),
    ]);
    let (prob, _) = gram_problem(&p, 2, 3);
    let sol = solve_feasibility(&prob, &SolverConfig::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Infeasible);
    let y = sol.dual_ray.expect("infeasible result carries a ray");
    let by: f64 = prob.rhs().iter().zip(&y).map(|(b, v)| b * v).sum();
    assert!(by > 0.0);
    let slack = prob.adjoint(&y);
    let lam = min_eigenvalue_check(&(-&slack[0]), 0.0).unwrap().min_eigenvalue;
    assert!(lam >= -1e-7 * by, "ray slack eigenvalue {lam}");
}

#[test]
fn single_negative_scalar_is_infeasible() {
    let mut prob = SdpProblem::new(vec![1], 0);
    let mut c = Constraint::new(-1.0);
    c.push_psd(0, 0, 0, 1.0);
    prob.push(c);
    let sol = solve_feasibility(&prob, &SolverConfig::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Infeasible);
}

#[test]
fn random_feasible_instances_are_classified_feasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..50 {
        let prob = feasible_instance(&mut rng);
        let sol = solve_feasibility(&prob, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Feasible, "instance {k}");
        assert!(sol.primal_residual <= 1e-7, "instance {k}");
        assert!(sol.min_eigenvalue >= -1e-8, "instance {k}");
    }
}

#[test]
fn random_infeasible_instances_are_classified_infeasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..50 {
        let prob = infeasible_instance(&mut rng);
        let sol = solve_feasibility(&prob, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible, "instance {k}");
    }
}

#[test]
fn solving_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let prob = feasible_instance(&mut rng);
    let a = solve_feasibility(&prob, &SolverConfig::default()).unwrap();
    let b = solve_feasibility(&prob, &SolverConfig::default()).unwrap();
    assert_eq!(a.blocks, b.blocks);
    assert_eq!(a.free, b.free);
    assert_eq!(a.iterations, b.iterations);
}
