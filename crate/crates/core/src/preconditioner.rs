//! Nyström approximation of the top kernel eigendirections, used to flatten
//! the spectrum seen by stochastic gradient steps.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{input, numeric, Result};
use crate::kernel::{kernel_matrix, kernel_matrix_unchecked, select_rows, KernelSpec};
use crate::linalg::{top_q_eigensystem, EigenSystem};
use crate::real::Real;

/// Relative floor applied to the `(q+1)`-th eigenvalue.
const NEXT_EIGEN_FLOOR: f64 = 1e-12;

/// Default Nyström subsample size and level for a dataset of `n` points.
pub fn default_size_and_level(n: usize) -> (usize, usize) {
    if n >= 4000 {
        return (1000, 100);
    }
    let s = (n / 4).clamp(2.min(n), 256);
    let q = (s / 4).clamp(1, 32).min(s.saturating_sub(1));
    (s, q)
}

#[derive(Debug, Clone)]
pub struct NystromPreconditioner<T: Real> {
    spec: KernelSpec,
    subsample: DMatrix<T>,
    indices: Vec<usize>,
    eig: EigenSystem<T>,
    /// `lambda_{q+1}` after flooring at `1e-12 * lambda_1`.
    lambda_next: T,
    d: DVector<T>,
    f: DMatrix<T>,
}

impl<T: Real> NystromPreconditioner<T> {
    /// Samples `s` rows of `x` uniformly without replacement and builds the
    /// level-`q` preconditioner from them.
    pub fn build(x: &DMatrix<T>, spec: &KernelSpec, s: usize, q: usize, seed: u64) -> Result<Self> {
        let n = x.nrows();
        if s > n {
            return input(format!("Nyström size s={s} exceeds data size n={n}"));
        }
        if q == 0 || q >= s {
            return input(format!("preconditioner level must satisfy 1 <= q < s, got q={q}, s={s}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let indices = index::sample(&mut rng, n, s).into_vec();
        let subsample = select_rows(x, &indices);
        Self::from_subsample_with_indices(spec, subsample, indices, q)
    }

    /// Builds the preconditioner from an explicit subsample.
    pub fn from_subsample(spec: &KernelSpec, subsample: DMatrix<T>, q: usize) -> Result<Self> {
        let indices = (0..subsample.nrows()).collect();
        Self::from_subsample_with_indices(spec, subsample, indices, q)
    }

    fn from_subsample_with_indices(
        spec: &KernelSpec,
        subsample: DMatrix<T>,
        indices: Vec<usize>,
        q: usize,
    ) -> Result<Self> {
        let gram = kernel_matrix_unchecked(spec, &subsample, &subsample);
        let eig = top_q_eigensystem(&gram, q)?;
        let top = eig.values[0];
        let last = eig.values[q - 1];
        let floor = T::of_f64(NEXT_EIGEN_FLOOR) * top;
        if !(top > T::zero() && last > floor) {
            return numeric(format!(
                "Nyström Gram matrix has rank below the requested level: lambda_{q} = {last:.3e}; use a smaller q"
            ));
        }
        let lambda_next = if eig.next < floor { floor } else { eig.next };
        let d = eig.values.map(|l| {
            let v = T::one() / l - lambda_next / (l * l);
            if v > T::zero() { v } else { T::zero() }
        });
        let mut f = eig.vectors.clone();
        for (j, mut col) in f.column_iter_mut().enumerate() {
            col *= d[j].sqrt();
        }
        Ok(Self { spec: *spec, subsample, indices, eig, lambda_next, d, f })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// The subsample `X_s`, one point per row.
    pub fn subsample(&self) -> &DMatrix<T> {
        &self.subsample
    }

    /// Row indices of `X_s` within the matrix it was sampled from.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn eigensystem(&self) -> &EigenSystem<T> {
        &self.eig
    }

    /// `lambda_{q+1}` as used in `D` (floored for rank-deficient subsamples).
    pub fn lambda_next(&self) -> T {
        self.lambda_next
    }

    /// Diagonal of `D = Lambda^-1 - lambda_{q+1} Lambda^-2`.
    pub fn d(&self) -> &DVector<T> {
        &self.d
    }

    /// `F = E sqrt(D)`, `s x q`.
    pub fn f(&self) -> &DMatrix<T> {
        &self.f
    }

    pub fn size(&self) -> usize {
        self.subsample.nrows()
    }

    pub fn level(&self) -> usize {
        self.f.ncols()
    }

    /// `M = K(Z, X_s) F` for the model centers `Z`.
    pub fn attach(&self, centers: &DMatrix<T>) -> Result<AttachedPreconditioner<T>> {
        if centers.nrows() == 0 {
            return input("attach_centers: center set is empty");
        }
        if centers.ncols() != self.subsample.ncols() {
            return input(format!(
                "attach_centers: centers have dimension {}, subsample has {}",
                centers.ncols(),
                self.subsample.ncols()
            ));
        }
        let m = kernel_matrix_unchecked(&self.spec, centers, &self.subsample) * &self.f;
        Ok(AttachedPreconditioner { base: self.clone(), m })
    }

    /// `h1 = F^T K(X_s, X_m) g_m`, the factor shared by the Nyström-weight
    /// update and the accumulated-gradient correction.
    pub fn correction_coeffs(&self, batch: &DMatrix<T>, grad: &DMatrix<T>) -> Result<DMatrix<T>> {
        if batch.ncols() != self.subsample.ncols() {
            return input(format!(
                "correction_coeffs: batch dimension {} does not match subsample dimension {}",
                batch.ncols(),
                self.subsample.ncols()
            ));
        }
        if batch.nrows() != grad.nrows() {
            return input(format!(
                "correction_coeffs: batch has {} rows but gradient has {}",
                batch.nrows(),
                grad.nrows()
            ));
        }
        let k_sm = kernel_matrix_unchecked(&self.spec, &self.subsample, batch);
        Ok(self.f.tr_mul(&(k_sm * grad)))
    }

    /// Evaluates `(P^s K(., A) u)(B) = K(B, A) u - K(B, X_s) F F^T K(X_s, A) u`.
    pub fn apply_action(&self, a: &DMatrix<T>, u: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
        if a.nrows() != u.nrows() {
            return input(format!("apply_action: A has {} rows but u has {}", a.nrows(), u.nrows()));
        }
        let k_ba = kernel_matrix(&self.spec, b, a)?;
        let k_sa = kernel_matrix(&self.spec, &self.subsample, a)?;
        let k_bs = kernel_matrix(&self.spec, b, &self.subsample)?;
        let h1 = self.f.tr_mul(&(k_sa * u));
        Ok(k_ba * u - k_bs * (&self.f * h1))
    }
}

/// A preconditioner bound to a particular center set.
#[derive(Debug, Clone)]
pub struct AttachedPreconditioner<T: Real> {
    pub base: NystromPreconditioner<T>,
    /// `K(Z, X_s) F`, `p x q`.
    pub m: DMatrix<T>,
}

impl<T: Real> AttachedPreconditioner<T> {
    pub fn centers_len(&self) -> usize {
        self.m.nrows()
    }
}
