//! Radial kernels and kernel-matrix assembly.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::real::Real;

/// Entry count below which kernel matrices are assembled on the calling thread.
const PARALLEL_THRESHOLD: usize = 16 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `exp(-|x - z| / bandwidth)`
    Laplace,
    /// `exp(-|x - z|^2 / (2 bandwidth^2))`
    Gaussian,
}

impl KernelFamily {
    pub fn tag(self) -> u8 {
        match self {
            KernelFamily::Laplace => 0,
            KernelFamily::Gaussian => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(KernelFamily::Laplace),
            1 => Some(KernelFamily::Gaussian),
            _ => None,
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "laplace" | "laplacian" => Ok(KernelFamily::Laplace),
            "gaussian" | "rbf" => Ok(KernelFamily::Gaussian),
            other => Err(format!("unknown kernel family '{other}'")),
        }
    }
}

#[derive(Deserialize)]
struct RawKernelSpec {
    family: KernelFamily,
    bandwidth: f64,
}

/// A normalized radial kernel with a positive length scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelSpec")]
pub struct KernelSpec {
    family: KernelFamily,
    bandwidth: f64,
}

impl TryFrom<RawKernelSpec> for KernelSpec {
    type Error = Error;

    fn try_from(raw: RawKernelSpec) -> Result<Self> {
        KernelSpec::new(raw.family, raw.bandwidth)
    }
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return input(format!("kernel bandwidth must be positive and finite, got {bandwidth}"));
        }
        Ok(Self { family, bandwidth })
    }

    pub fn laplace(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Laplace, bandwidth)
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Kernel value from a squared Euclidean distance.
    #[inline]
    fn from_sq_dist<T: Real>(&self, sq: T) -> T {
        let bw = T::of_f64(self.bandwidth);
        match self.family {
            KernelFamily::Laplace => (-(sq.sqrt()) / bw).exp(),
            KernelFamily::Gaussian => (-sq / (bw * bw * T::of_f64(2.0))).exp(),
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked<T: Real>(&self, x: &[T], z: &[T]) -> T {
        let mut sq = T::zero();
        for (&a, &b) in x.iter().zip(z) {
            let diff = a - b;
            sq += diff * diff;
        }
        self.from_sq_dist(sq)
    }
}

/// Evaluates `k(x, z)`.
pub fn kernel_eval<T: Real>(spec: &KernelSpec, x: &[T], z: &[T]) -> Result<T> {
    if x.len() != z.len() {
        return input(format!("kernel_eval: dimension mismatch {} vs {}", x.len(), z.len()));
    }
    if x.is_empty() {
        return input("kernel_eval: points must have dimension >= 1");
    }
    if x.iter().chain(z).any(|v| !v.is_finite()) {
        return input("kernel_eval: non-finite coordinate");
    }
    Ok(spec.eval_unchecked(x, z))
}

/// Kernel matrix `K(A, B)` with `A` and `B` holding one point per row.
///
/// Every entry is evaluated independently, so the result does not depend on
/// how columns are split across threads, and `K(A, B) == K(B, A)^T` exactly.
pub fn kernel_matrix<T: Real>(spec: &KernelSpec, a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if a.ncols() != b.ncols() {
        return input(format!(
            "kernel_matrix: dimension mismatch ({} vs {} columns)",
            a.ncols(),
            b.ncols()
        ));
    }
    Ok(kernel_matrix_unchecked(spec, a, b))
}

pub(crate) fn kernel_matrix_unchecked<T: Real>(spec: &KernelSpec, a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let (n, m) = (a.nrows(), b.nrows());
    let mut out = DMatrix::<T>::zeros(n, m);
    if n == 0 || m == 0 {
        return out;
    }
    // Transposed copies make each point a contiguous column.
    let at = a.transpose();
    let bt = b.transpose();
    let fill = |(j, col): (usize, &mut [T])| {
        let z = bt.column(j);
        let z = z.as_slice();
        for (i, entry) in col.iter_mut().enumerate() {
            *entry = spec.eval_unchecked(at.column(i).as_slice(), z);
        }
    };
    if n * m < PARALLEL_THRESHOLD {
        out.as_mut_slice().chunks_mut(n).enumerate().for_each(fill);
    } else {
        out.as_mut_slice().par_chunks_mut(n).enumerate().for_each(fill);
    }
    out
}

/// Copies the given rows of `x` into a new matrix.
pub fn select_rows<T: Real>(x: &DMatrix<T>, rows: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

/// Converts a matrix between scalar types.
pub fn cast<S: Real, T: Real>(m: &DMatrix<S>) -> DMatrix<T> {
    m.map(|v| T::of_f64(v.as_f64()))
}
