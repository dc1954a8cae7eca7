//! Dense symmetric primitives: top-q eigensystem and SPD solves.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{input, numeric, Result};
use crate::real::Real;

/// The `q` largest eigenpairs of a symmetric matrix plus the `(q+1)`-th eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem<T: Real> {
    /// Leading eigenvalues, descending.
    pub values: DVector<T>,
    /// Unit eigenvectors, one per column, matching `values`.
    pub vectors: DMatrix<T>,
    /// The eigenvalue following the last one kept.
    pub next: T,
}

impl<T: Real> EigenSystem<T> {
    pub fn level(&self) -> usize {
        self.values.len()
    }
}

/// Largest absolute asymmetry `|A_ij - A_ji|` relative to `max |A_ij|`.
pub fn asymmetry<T: Real>(a: &DMatrix<T>) -> f64 {
    let n = a.nrows();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in 0..j {
            worst = worst.max((a[(i, j)] - a[(j, i)]).as_f64().abs());
        }
    }
    worst / scale
}

fn symmetry_tolerance<T: Real>() -> f64 {
    1e-10f64.max(64.0 * T::epsilon().as_f64())
}

/// Full eigendecomposition sorted by descending eigenvalue.
///
/// Ties keep the solver's original order, so the result is deterministic.
pub fn sorted_eigen<T: Real>(a: &DMatrix<T>) -> Result<(DVector<T>, DMatrix<T>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return input(format!("eigensolver: matrix is {}x{}, not square", n, a.ncols()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return input("eigensolver: matrix has non-finite entries");
    }
    let max_iter = 1000 * n.max(1);
    let eig = SymmetricEigen::try_new(a.clone(), T::default_epsilon(), max_iter).ok_or_else(|| {
        crate::Error::Numeric(format!(
            "symmetric eigensolver did not converge within {max_iter} iterations (n={n}, |A|_F={:.3e})",
            a.norm().as_f64()
        ))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let norm = col.norm();
        if norm > T::zero() {
            col /= norm;
        }
        vectors.set_column(dst, &col);
    }
    Ok((values, vectors))
}

/// Top-`q` eigensystem of a symmetric `s x s` matrix, `1 <= q < s`.
pub fn top_q_eigensystem<T: Real>(a: &DMatrix<T>, q: usize) -> Result<EigenSystem<T>> {
    let s = a.nrows();
    if s != a.ncols() {
        return input(format!("top_q_eigensystem: matrix is {}x{}, not square", s, a.ncols()));
    }
    if q == 0 || q >= s {
        return input(format!("top_q_eigensystem: need 1 <= q < s, got q={q}, s={s}"));
    }
    let asym = asymmetry(a);
    if asym > symmetry_tolerance::<T>() {
        return input(format!("top_q_eigensystem: matrix is not symmetric (relative asymmetry {asym:.3e})"));
    }
    let (values, vectors) = sorted_eigen(a)?;
    Ok(EigenSystem {
        values: values.rows(0, q).into_owned(),
        vectors: vectors.columns(0, q).into_owned(),
        next: values[q],
    })
}

/// Solves `(A + jitter I) X = B` for symmetric positive definite `A` by Cholesky.
///
/// When the factorization fails the jitter is multiplied by ten, up to
/// `retries` times. Returns the solution and the jitter actually used.
pub fn spd_solve<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, jitter: T, retries: usize) -> Result<(DMatrix<T>, T)> {
    let n = a.nrows();
    if n != a.ncols() || b.nrows() != n {
        return input(format!(
            "spd_solve: shape mismatch ({}x{} system, {}x{} right-hand side)",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        ));
    }
    let mut jitter = jitter;
    let floor = T::of_f64(1e-14) * (a.trace() / T::of_f64(n.max(1) as f64)).abs();
    for attempt in 0..=retries {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok((chol.solve(b), jitter));
        }
        if attempt < retries {
            jitter = if jitter > T::zero() { jitter * T::of_f64(10.0) } else { floor.max(T::epsilon()) };
        }
    }
    numeric(format!(
        "Cholesky factorization failed for {n}x{n} system after {retries} jitter increases (final jitter {jitter:.3e})"
    ))
}
