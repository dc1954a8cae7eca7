//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use kslv::{KernelFamily, KernelSpec};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        scale * v
    })
}

/// `|a - b|_F / |b|_F`.
pub fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (a - b).norm() / b.norm()
}

/// Kernel value from the closed-form expressions, one pair at a time.
pub fn kernel_ref(spec: &KernelSpec, x: &[f64], z: &[f64]) -> f64 {
    let sq: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
    let bw = spec.bandwidth();
    match spec.family() {
        KernelFamily::Laplace => (-sq.sqrt() / bw).exp(),
        KernelFamily::Gaussian => (-sq / (2.0 * bw * bw)).exp(),
    }
}

/// Double-loop kernel matrix.
pub fn gram_ref(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = a.row_iter().map(|r| r.iter().copied().collect()).collect();
    let cols: Vec<Vec<f64>> = b.row_iter().map(|r| r.iter().copied().collect()).collect();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| kernel_ref(spec, &rows[i], &cols[j]))
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
pub fn eig_desc(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| e.eigenvalues[j].total_cmp(&e.eigenvalues[i]));
    let values = order.iter().map(|&i| e.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(a.nrows(), a.nrows(), |r, c| e.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Nyström preconditioner written as `I - sum_i (1 - l_{q+1}/l_i) psi_i (x) psi_i`
/// with eigenfunctions `psi_i = K(., X_s) e_i / sqrt(l_i)`.
pub struct SpectralPreconditioner {
    pub spec: KernelSpec,
    pub subsample: DMatrix<f64>,
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
    pub level: usize,
}

impl SpectralPreconditioner {
    pub fn new(spec: KernelSpec, subsample: DMatrix<f64>, level: usize) -> Self {
        let (values, vectors) = eig_desc(&gram_ref(&spec, &subsample, &subsample));
        Self { spec, subsample, values, vectors, level }
    }

    pub fn lambda_next(&self) -> f64 {
        self.values[self.level]
    }

    /// `psi_i(B)` as a column vector.
    fn eigenfunction(&self, i: usize, b: &DMatrix<f64>) -> DMatrix<f64> {
        let col = gram_ref(&self.spec, b, &self.subsample) * self.vectors.column(i) / self.values[i].sqrt();
        DMatrix::from_column_slice(b.nrows(), 1, col.as_slice())
    }

    /// `(P K(., A) u)(B)`.
    pub fn apply(&self, a: &DMatrix<f64>, u: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = gram_ref(&self.spec, b, a) * u;
        for i in 0..self.level {
            let weight = 1.0 - self.lambda_next() / self.values[i];
            // <psi_i, K(., A) u> = psi_i(A)^T u.
            let inner = self.eigenfunction(i, a).transpose() * u;
            out -= self.eigenfunction(i, b) * inner * weight;
        }
        out
    }
}

pub fn pick(a: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), a.ncols(), |i, j| a[(rows[i], j)])
}

/// One update of the projected method: `alpha -= eta * K(Z,Z)^-1 (P K(., X_m) g)(Z)`.
pub fn ep3_reference(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    z: &DMatrix<f64>,
    spec: KernelSpec,
    pre: &SpectralPreconditioner,
    schedule: &[Vec<usize>],
    eta: f64,
) -> Vec<DMatrix<f64>> {
    let k_zz = gram_ref(&spec, z, z).cholesky().unwrap();
    let mut alpha = DMatrix::zeros(z.nrows(), y.ncols());
    let mut out = Vec::new();
    for rows in schedule {
        let xb = pick(x, rows);
        let g = gram_ref(&spec, &xb, z) * &alpha - pick(y, rows);
        alpha -= k_zz.solve(&pre.apply(&xb, &g, z)) * eta;
        out.push(alpha.clone());
    }
    out
}

/// Well separated small-sample data: `n` points around `c` means.
pub fn clustered(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f64) -> DMatrix<f64> {
    let means = gaussian(rng, 4, d, 2.0);
    let noise = gaussian(rng, n, d, spread);
    DMatrix::from_fn(n, d, |i, j| means[(i % 4, j)] + noise[(i, j)])
}
