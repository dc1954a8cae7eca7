mod common;

use common::{eig_desc, gaussian, gram_ref, rel, rng};
use kslv::oracle::pseudo_inverse;
use kslv::projection::{ep2_solve, project_exact, project_inexact, Ep2Config, Ep2Solver};
use kslv::KernelSpec;
use nalgebra::DMatrix;

/// Centers spread out enough for a well-conditioned Gram matrix.
fn spread_centers(seed: u64, p: usize, d: usize) -> DMatrix<f64> {
    gaussian(&mut rng(seed), p, d, 2.0)
}

#[test]
fn single_center() {
    let z = DMatrix::from_element(1, 2, 0.3);
    let theta = project_exact(&z, &KernelSpec::laplace(1.0).unwrap(), &DMatrix::from_element(1, 1, 0.5), Some(0.0)).unwrap();
    assert_eq!(theta[(0, 0)], 0.5);
}

#[test]
fn exact_projection_is_idempotent() {
    let spec = KernelSpec::gaussian(1.0).unwrap();
    for seed in 0..5 {
        let z = spread_centers(seed, 30, 4);
        let theta = gaussian(&mut rng(seed + 100), 30, 3, 1.0);
        let h = gram_ref(&spec, &z, &z) * &theta;
        let back = project_exact(&z, &spec, &h, Some(0.0)).unwrap();
        assert!(rel(&back, &theta) <= 1e-8, "seed {seed}: {:e}", rel(&back, &theta));
    }
}

#[test]
fn exact_projection_preserves_values_at_centers() {
    let spec = KernelSpec::laplace(1.0).unwrap();
    let mut r = rng(7);
    let z = gaussian(&mut r, 60, 3, 1.0);
    let h = gaussian(&mut r, 60, 2, 1.0);
    let theta = project_exact(&z, &spec, &h, None).unwrap();
    let values = gram_ref(&spec, &z, &z) * &theta;
    assert!((values - &h).norm() <= 1e-6 * h.norm());
}

#[test]
fn exact_projection_matches_pseudoinverse() {
    let spec = KernelSpec::laplace(2.0).unwrap();
    let mut r = rng(9);
    let z = gaussian(&mut r, 50, 5, 1.5);
    let h = gaussian(&mut r, 50, 2, 1.0);
    let theta = project_exact(&z, &spec, &h, Some(0.0)).unwrap();
    let oracle = pseudo_inverse(gram_ref(&spec, &z, &z)).unwrap() * &h;
    assert!(rel(&theta, &oracle) <= 1e-8);
    // The default jitter stays within the residual contract.
    let jittered = project_exact(&z, &spec, &h, None).unwrap();
    assert!(rel(&(gram_ref(&spec, &z, &z) * jittered), &h) <= 1e-6);
}

#[test]
fn exact_projection_rejects_bad_input() {
    let spec = KernelSpec::laplace(1.0).unwrap();
    let z = DMatrix::from_element(3, 2, 0.0);
    assert!(project_exact(&z, &spec, &DMatrix::zeros(2, 1), None).is_err());
    assert!(project_exact(&z, &spec, &DMatrix::zeros(3, 1), Some(-1.0)).is_err());
}

#[test]
fn ep2_zero_targets_stay_zero() {
    let z = spread_centers(1, 20, 3);
    let spec = KernelSpec::laplace(1.0).unwrap();
    let alpha = ep2_solve(&z, &DMatrix::zeros(20, 2), &spec, 8, 2, 4, 3, 0).unwrap();
    assert!(alpha.iter().all(|v| *v == 0.0));
    let solver = Ep2Solver::new(&z, &spec, &Ep2Config::default(), 0).unwrap();
    assert!(project_inexact(&solver, &DMatrix::zeros(20, 1), 0).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn ep2_converges_to_dense_solve() {
    let spec = KernelSpec::laplace(1.0).unwrap();
    let x = spread_centers(3, 30, 3);
    let y = gaussian(&mut rng(4), 30, 2, 1.0);
    let alpha = ep2_solve(&x, &y, &spec, 15, 5, 10, 50, 2).unwrap();
    let oracle = gram_ref(&spec, &x, &x).lu().solve(&y).unwrap();
    assert!(rel(&alpha, &oracle) <= 1e-3, "{:e}", rel(&alpha, &oracle));
}

#[test]
fn ep2_without_preconditioner_is_plain_sgd() {
    let spec = KernelSpec::gaussian(1.0).unwrap();
    let x = spread_centers(5, 5, 2);
    let y = gaussian(&mut rng(6), 5, 1, 1.0);
    let cfg = Ep2Config { epochs: 7, batch_size: Some(5), nystrom_size: Some(5), level: Some(0), learning_rate: None };
    let solver = Ep2Solver::new(&x, &spec, &cfg, 0).unwrap();
    assert!(solver.preconditioner().is_none());
    let (alpha, _) = solver.solve(&y, 1).unwrap();
    let eta = solver.learning_rate();
    let k = gram_ref(&spec, &x, &x);
    let mut oracle = DMatrix::zeros(5, 1);
    for _ in 0..7 {
        let g = &k * &oracle - &y;
        oracle -= g * eta;
    }
    assert!(rel(&alpha, &oracle) <= 1e-12);
}

#[test]
fn ep2_full_batch_step_contracts_every_direction() {
    let spec = KernelSpec::laplace(1.0).unwrap();
    let x = spread_centers(8, 10, 2);
    let y = gaussian(&mut rng(9), 10, 1, 1.0);
    let alpha = ep2_solve(&x, &y, &spec, 10, 9, 10, 1, 3).unwrap();
    let k = gram_ref(&spec, &x, &x);
    let (_, vectors) = eig_desc(&k);
    let before = vectors.transpose() * (-&y);
    let after = vectors.transpose() * (&k * alpha - &y);
    for i in 0..10 {
        assert!(after[i].abs() < before[i].abs(), "direction {i}: {} -> {}", before[i], after[i]);
    }
}

/// Measured errors on this instance over seeds 12..=15: 0.052..0.071 after
/// two epochs, below 0.01 after four.
const INEXACT_TWO_EPOCH_TOL: f64 = 0.08;
const INEXACT_FOUR_EPOCH_TOL: f64 = 0.01;

#[test]
fn inexact_projection_close_to_exact() {
    // Right-hand sides shaped like accumulated gradients: values at the
    // centers of a function spanned by other points.
    let spec = KernelSpec::laplace(0.5).unwrap();
    for seed in 12..=15 {
        let mut r = rng(seed);
        let z = gaussian(&mut r, 100, 4, 2.0);
        let w = gaussian(&mut r, 20, 4, 2.0);
        let h = gram_ref(&spec, &z, &w) * gaussian(&mut r, 20, 3, 1.0);
        let exact = project_exact(&z, &spec, &h, None).unwrap();
        for (epochs, tol) in [(2, INEXACT_TWO_EPOCH_TOL), (4, INEXACT_FOUR_EPOCH_TOL)] {
            let solver = Ep2Solver::new(&z, &spec, &Ep2Config { epochs, ..Default::default() }, 4).unwrap();
            let theta = project_inexact(&solver, &h, 5).unwrap();
            let err = rel(&theta, &exact);
            assert!(err <= tol, "seed {seed}, {epochs} epochs: relative error {err:.4}");
        }
    }
}

#[test]
fn ep2_reports_divergence() {
    let spec = KernelSpec::gaussian(3.0).unwrap();
    let x = spread_centers(1, 30, 2);
    let cfg = Ep2Config { epochs: 20, batch_size: Some(30), nystrom_size: Some(10), level: Some(0), learning_rate: Some(50.0) };
    let solver = Ep2Solver::new(&x, &spec, &cfg, 0).unwrap();
    let err = solver.solve(&DMatrix::from_element(30, 1, 1.0), 0).unwrap_err();
    assert!(err.to_string().contains("smaller learning rate"));
}
