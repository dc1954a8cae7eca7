//! Dense ground-truth solvers, always in `f64`.
//!
//! These back the correctness checks of the stochastic solver: the
//! pseudoinverse solution, the fit-then-project iteration, its closed-form
//! fixed point and the limiting noise variance of that fixed point.

use nalgebra::{Cholesky, DMatrix, Dyn, SVD};

use crate::error::{input, numeric, Result};
use crate::kernel::{kernel_matrix, KernelSpec};
use crate::linalg::sorted_eigen;

/// Largest `n` or `p` accepted by the dense oracles.
pub const DENSE_GUARD: usize = 2000;

/// Condition numbers at or above this are treated as rank deficient.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Relative singular-value cutoff of the pseudoinverse.
pub const PINV_CUTOFF: f64 = 1e-10;

fn check_shapes(x: &DMatrix<f64>, z: &DMatrix<f64>, y: Option<&DMatrix<f64>>) -> Result<()> {
    if x.nrows() > DENSE_GUARD || z.nrows() > DENSE_GUARD {
        return input(format!(
            "dense oracle limited to {DENSE_GUARD} points and centers, got n={}, p={}",
            x.nrows(),
            z.nrows()
        ));
    }
    if x.nrows() == 0 || z.nrows() == 0 {
        return input("dense oracle needs at least one point and one center");
    }
    if x.ncols() != z.ncols() {
        return input(format!("data has dimension {}, centers {}", x.ncols(), z.ncols()));
    }
    if let Some(y) = y {
        if y.nrows() != x.nrows() {
            return input(format!("{} points but {} target rows", x.nrows(), y.nrows()));
        }
    }
    Ok(())
}

/// Weights of the minimum-norm least-squares model: `K(X, Z)^+ Y`.
pub fn min_norm_solution(x: &DMatrix<f64>, y: &DMatrix<f64>, z: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    check_shapes(x, z, Some(y))?;
    let k_xz = kernel_matrix(spec, x, z)?;
    Ok(pseudo_inverse(k_xz)? * y)
}

/// Moore-Penrose pseudoinverse with singular values below `1e-10 * sigma_max` dropped.
pub fn pseudo_inverse(a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = SVD::new(a, true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    svd.pseudo_inverse(PINV_CUTOFF * sigma_max)
        .map_err(|e| crate::Error::Numeric(format!("pseudoinverse failed: {e}")))
}

/// Ratio of largest to smallest eigenvalue of a symmetric matrix; infinite
/// when the smallest is not positive.
pub fn spd_condition(a: &DMatrix<f64>) -> Result<f64> {
    let (values, _) = sorted_eigen(a)?;
    let (hi, lo) = (values[0], values[values.len() - 1]);
    Ok(if lo > 0.0 { hi / lo } else { f64::INFINITY })
}

/// Ratio of largest to smallest singular value.
pub fn singular_condition(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let hi = sv.iter().cloned().fold(0.0, f64::max);
    let lo = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if lo > 0.0 { hi / lo } else { f64::INFINITY }
}

fn cholesky(a: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a).ok_or_else(|| crate::Error::Numeric(format!("{what} is not positive definite")))
}

fn require_condition(cond: f64, what: &str) -> Result<()> {
    if !(cond < CONDITION_LIMIT) {
        return numeric(format!("{what} is rank deficient (condition number {cond:.3e} >= {CONDITION_LIMIT:.0e})"));
    }
    Ok(())
}

/// Factored form of the fit-then-project fixed point
/// `beta = (K_ZX K_XX^-1 K_XZ)^-1 K_ZX K_XX^-1 Y`.
///
/// Factoring once lets many right-hand sides share the work.
pub struct FixedPointOperator {
    /// `W = K_XX^-1 K_XZ`, `n x p`.
    w: DMatrix<f64>,
    /// Cholesky factor of `A = K_ZX K_XX^-1 K_XZ`.
    inner: Cholesky<f64, Dyn>,
}

impl FixedPointOperator {
    pub fn new(x: &DMatrix<f64>, z: &DMatrix<f64>, spec: &KernelSpec) -> Result<Self> {
        check_shapes(x, z, None)?;
        let k_xx = kernel_matrix(spec, x, x)?;
        let k_xz = kernel_matrix(spec, x, z)?;
        require_condition(spd_condition(&k_xx)?, "K(X, X)")?;
        require_condition(singular_condition(&k_xz), "K(Z, X)")?;
        let w = cholesky(k_xx, "K(X, X)")?.solve(&k_xz);
        let a = k_xz.tr_mul(&w);
        let a = (&a + a.transpose()) * 0.5;
        require_condition(spd_condition(&a)?, "K(Z, X) K(X, X)^-1 K(X, Z)")?;
        let inner = cholesky(a, "K(Z, X) K(X, X)^-1 K(X, Z)")?;
        Ok(Self { w, inner })
    }

    pub fn solve(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.w.nrows() {
            return input(format!("{} points but {} target rows", self.w.nrows(), y.nrows()));
        }
        Ok(self.inner.solve(&self.w.tr_mul(y)))
    }

    /// `tr(A^-2 K_ZX K_XX^-2 K_XZ)` with `A = K_ZX K_XX^-1 K_XZ`.
    pub fn noise_variance(&self) -> f64 {
        let wtw = self.w.tr_mul(&self.w);
        let a_inv = self.inner.inverse();
        (&a_inv * &a_inv * wtw).trace()
    }
}

/// Closed-form limit of [`ep4_exact_iterate`].
pub fn fixed_point_solution(x: &DMatrix<f64>, y: &DMatrix<f64>, z: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    check_shapes(x, z, Some(y))?;
    FixedPointOperator::new(x, z, spec)?.solve(y)
}

/// Limit of `E|beta_t - beta*|^2 / sigma^2` when targets carry independent
/// centered noise of variance `sigma^2`.
pub fn noise_variance_limit(x: &DMatrix<f64>, z: &DMatrix<f64>, spec: &KernelSpec) -> Result<f64> {
    Ok(FixedPointOperator::new(x, z, spec)?.noise_variance())
}

/// Fit-then-project iteration. Each round fits the residual targets exactly
/// in the span of the data, projects that fit onto the span of the centers and
/// adds it to the running weights. Returns `beta_1 ..= beta_iters`.
pub fn ep4_exact_iterate(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    z: &DMatrix<f64>,
    spec: &KernelSpec,
    iters: usize,
) -> Result<Vec<DMatrix<f64>>> {
    check_shapes(x, z, Some(y))?;
    let k_xx = kernel_matrix(spec, x, x)?;
    let k_xz = kernel_matrix(spec, x, z)?;
    let k_zz = kernel_matrix(spec, z, z)?;
    require_condition(spd_condition(&k_xx)?, "K(X, X)")?;
    require_condition(singular_condition(&k_xz), "K(Z, X)")?;
    let fit = cholesky(k_xx, "K(X, X)")?;
    let project = cholesky(k_zz, "K(Z, Z)")?;

    let mut beta = DMatrix::zeros(z.nrows(), y.ncols());
    let mut out = Vec::with_capacity(iters);
    for _ in 0..iters {
        let residual = y - &k_xz * &beta;
        let alpha = fit.solve(&residual);
        let at_centers = k_xz.tr_mul(&alpha);
        beta += project.solve(&at_centers);
        out.push(beta.clone());
    }
    Ok(out)
}

/// Spectral radius of `C = K_ZZ^-1 K_ZX K_XX^-1 K_XZ - I`, the iteration
/// matrix of [`ep4_exact_iterate`]. The iteration converges when this is below one.
pub fn iteration_spectral_radius(x: &DMatrix<f64>, z: &DMatrix<f64>, spec: &KernelSpec) -> Result<f64> {
    check_shapes(x, z, None)?;
    let k_xx = kernel_matrix(spec, x, x)?;
    let k_xz = kernel_matrix(spec, x, z)?;
    let k_zz = kernel_matrix(spec, z, z)?;
    let w = cholesky(k_xx, "K(X, X)")?.solve(&k_xz);
    let a = k_xz.tr_mul(&w);
    // Similar symmetric form L^-1 A L^-T with K_ZZ = L L^T.
    let l = cholesky(k_zz, "K(Z, Z)")?.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| crate::Error::Numeric("K(Z, Z) factor is singular".into()))?;
    let sym = &l_inv * a * l_inv.transpose();
    let sym = (&sym + sym.transpose()) * 0.5;
    let (values, _) = sorted_eigen(&sym)?;
    Ok(values.iter().map(|mu| (mu - 1.0).abs()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(n: usize, d: usize, salt: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |i, j| (((i + salt) * 7919 + j * 104729 + i * j * 31) % 1000) as f64 / 250.0)
    }

    #[test]
    fn square_case_recovers_weights() {
        let x = pts(10, 3, 0);
        let spec = KernelSpec::laplace(1.0).unwrap();
        let w = DMatrix::from_fn(10, 2, |i, j| (i + 2 * j) as f64 * 0.1 - 0.5);
        let y = kernel_matrix(&spec, &x, &x).unwrap() * &w;
        let alpha = min_norm_solution(&x, &y, &x, &spec).unwrap();
        assert!((alpha - &w).norm() / w.norm() < 1e-9);
    }

    #[test]
    fn one_by_one() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let z = DMatrix::from_row_slice(1, 1, &[1.0]);
        let spec = KernelSpec::laplace(1.0).unwrap();
        let y = DMatrix::from_element(1, 1, 2.0);
        let alpha = min_norm_solution(&x, &y, &z, &spec).unwrap();
        assert!((alpha[(0, 0)] - 2.0 / (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn guards() {
        let spec = KernelSpec::laplace(1.0).unwrap();
        let big = DMatrix::zeros(DENSE_GUARD + 1, 1);
        let small = DMatrix::zeros(3, 1);
        assert!(matches!(
            min_norm_solution(&big, &DMatrix::zeros(DENSE_GUARD + 1, 1), &small, &spec),
            Err(crate::Error::Input(_))
        ));
        // Duplicate points make K(X, X) singular.
        let dup = DMatrix::from_element(4, 2, 1.0);
        let z = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let err = fixed_point_solution(&dup, &DMatrix::zeros(4, 1), &z, &spec).unwrap_err();
        assert!(matches!(err, crate::Error::Numeric(_)), "{err}");
    }

    #[test]
    fn centers_equal_data_converges_in_one_round() {
        let x = pts(15, 2, 3);
        let spec = KernelSpec::laplace(1.5).unwrap();
        let y = DMatrix::from_fn(15, 1, |i, _| (i as f64).sin());
        let iters = ep4_exact_iterate(&x, &y, &x, &spec, 3).unwrap();
        let direct = Cholesky::new(kernel_matrix(&spec, &x, &x).unwrap()).unwrap().solve(&y);
        for beta in &iters {
            assert!((beta - &direct).norm() / direct.norm() < 1e-9);
        }
        let fp = fixed_point_solution(&x, &y, &x, &spec).unwrap();
        assert!((fp - &direct).norm() / direct.norm() < 1e-9);
        assert!(iteration_spectral_radius(&x, &x, &spec).unwrap() < 1e-8);
    }

    #[test]
    fn zero_targets() {
        let x = pts(12, 2, 1);
        let z = pts(4, 2, 50);
        let spec = KernelSpec::laplace(1.0).unwrap();
        let iters = ep4_exact_iterate(&x, &DMatrix::zeros(12, 1), &z, &spec, 5).unwrap();
        assert!(iters.iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn noise_variance_collapses_when_centers_are_data() {
        let x = pts(8, 2, 7);
        let spec = KernelSpec::laplace(1.0).unwrap();
        let k = kernel_matrix(&spec, &x, &x).unwrap();
        let k_inv = k.try_inverse().unwrap();
        let expected = (&k_inv * &k_inv).trace();
        let got = noise_variance_limit(&x, &x, &spec).unwrap();
        assert!((got - expected).abs() / expected < 1e-8);
    }

    #[test]
    fn noise_variance_single_point() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let z = DMatrix::from_row_slice(1, 1, &[0.5]);
        let spec = KernelSpec::laplace(1.0).unwrap();
        // A = k^2, trace(A^-2 k^2) = 1 / k^2.
        let k = (-0.5f64).exp();
        let got = noise_variance_limit(&x, &z, &spec).unwrap();
        assert!((got - 1.0 / (k * k)).abs() < 1e-12);
    }
}
