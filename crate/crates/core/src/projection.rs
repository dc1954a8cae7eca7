//! Projection of an accumulated gradient onto the span of the model centers.
//!
//! Given evaluations `h` of a function at the centers `Z`, the projection is
//! `K(., Z) theta` with `K(Z, Z) theta = h`. The exact path factors `K(Z, Z)`;
//! the inexact path runs a few epochs of Nyström-preconditioned SGD on the
//! regression problem `(Z, h)`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, numeric, Result};
use crate::kernel::{kernel_matrix, kernel_matrix_unchecked, select_rows, KernelSpec};
use crate::linalg::{sorted_eigen, spd_solve};
use crate::preconditioner::{default_size_and_level, NystromPreconditioner};
use crate::real::Real;

/// Largest center count accepted by the dense projection.
pub const EXACT_PROJECTION_GUARD: usize = 20_000;

/// Jitter retries before the exact projection gives up.
const JITTER_RETRIES: usize = 3;

/// Step-size multiplier on the inverse top eigenvalue of the preconditioned batch operator.
const STEP_SCALE: f64 = 1.5;

/// Step size for preconditioned SGD with unnormalized square loss.
///
/// The top eigenvalue of the preconditioned batch operator is approximated by
/// `beta + (m - 1) * lambda / s`, where `beta = max k(x, x) = 1` for the
/// normalized kernels here and `lambda` is the first eigenvalue of the
/// subsample Gram matrix left unsuppressed by the preconditioner.
pub fn spectral_step_size(batch: usize, subsample: usize, lambda: f64) -> f64 {
    let m = batch.max(1) as f64;
    STEP_SCALE / (1.0 + (m - 1.0) * lambda / subsample.max(1) as f64)
}

/// Batch size beyond which the step size stops growing linearly with the
/// batch: `s / lambda`, at least 1.
pub fn critical_batch_size(subsample: usize, lambda: f64) -> usize {
    let m = subsample as f64 / lambda;
    if m.is_finite() && m >= 1.0 {
        m.round().min(usize::MAX as f64) as usize
    } else {
        1
    }
}

/// Tracks the loss of an SGD run and flags divergence.
///
/// A run diverges when a loss is non-finite, or when it exceeds five times the
/// smallest loss seen so far while also exceeding the first loss observed.
#[derive(Debug, Clone)]
pub struct DivergenceGuard {
    first: Option<f64>,
    min: f64,
    level: f64,
    weight: f64,
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl DivergenceGuard {
    pub fn new() -> Self {
        Self::smoothed(1.0)
    }

    /// Guard acting on an exponential average of the observed losses; each
    /// new loss enters with `weight` in (0, 1].
    pub fn smoothed(weight: f64) -> Self {
        Self { first: None, min: f64::INFINITY, level: f64::NAN, weight: weight.clamp(f64::MIN_POSITIVE, 1.0) }
    }

    /// Returns true when `loss` signals divergence.
    pub fn observe(&mut self, loss: f64) -> bool {
        if !loss.is_finite() {
            return true;
        }
        let first = *self.first.get_or_insert(loss);
        self.level = if self.level.is_nan() { loss } else { self.level + self.weight * (loss - self.level) };
        let diverged = self.level > 5.0 * self.min && self.level > first;
        self.min = self.min.min(self.level);
        diverged
    }
}

/// Solves `(K(Z, Z) + jitter I) theta = h`. The default jitter is
/// `1e-8 * trace(K(Z, Z)) / p`.
pub fn project_exact<T: Real>(z: &DMatrix<T>, spec: &KernelSpec, h: &DMatrix<T>, jitter: Option<f64>) -> Result<DMatrix<T>> {
    project_exact_counted(z, spec, h, jitter).map(|(theta, _)| theta)
}

pub(crate) fn project_exact_counted<T: Real>(
    z: &DMatrix<T>,
    spec: &KernelSpec,
    h: &DMatrix<T>,
    jitter: Option<f64>,
) -> Result<(DMatrix<T>, u64)> {
    let p = z.nrows();
    if p > EXACT_PROJECTION_GUARD {
        return input(format!(
            "exact projection is limited to {EXACT_PROJECTION_GUARD} centers, got {p}; use inexact projection"
        ));
    }
    if h.nrows() != p {
        return input(format!("project_exact: {p} centers but h has {} rows", h.nrows()));
    }
    let gram = kernel_matrix(spec, z, z)?;
    let jitter = match jitter {
        Some(j) if j >= 0.0 && j.is_finite() => T::of_f64(j),
        Some(j) => return input(format!("project_exact: jitter must be finite and >= 0, got {j}")),
        None => T::of_f64(1e-8) * gram.trace() / T::of_f64(p as f64),
    };
    let (theta, _) = spd_solve(&gram, h, jitter, JITTER_RETRIES)?;
    let p = p as u64;
    // Cholesky factorization plus two triangular solves.
    Ok((theta, p * p * p / 3 + 2 * p * p))
}

/// Largest center count for which the inexact solver caches `K(Z, Z)`.
pub const GRAM_CACHE_LIMIT: usize = 4096;

/// Settings of the preconditioned SGD solver used for inexact projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ep2Config {
    pub epochs: usize,
    /// `None` picks the critical batch size `s / lambda`, capped at the point count.
    pub batch_size: Option<usize>,
    /// Nyström subsample size; `None` picks a default from the center count.
    pub nystrom_size: Option<usize>,
    /// Preconditioner level; `0` disables preconditioning.
    pub level: Option<usize>,
    pub learning_rate: Option<f64>,
}

impl Default for Ep2Config {
    fn default() -> Self {
        Self { epochs: 1, batch_size: None, nystrom_size: None, level: None, learning_rate: None }
    }
}

impl Ep2Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return input("inexact projection needs at least one epoch");
        }
        if self.batch_size == Some(0) {
            return input("inexact projection batch size must be >= 1");
        }
        if let Some(eta) = self.learning_rate {
            if !(eta.is_finite() && eta > 0.0) {
                return input(format!("inexact projection learning rate must be positive, got {eta}"));
            }
        }
        Ok(())
    }
}

/// Nyström-preconditioned SGD for kernel regression with centers equal to the
/// data. Built once and reused across right-hand sides.
#[derive(Debug, Clone)]
pub struct Ep2Solver<T: Real> {
    spec: KernelSpec,
    centers: DMatrix<T>,
    /// `K(Z, Z)`, kept when small enough.
    gram: Option<DMatrix<T>>,
    precond: Option<NystromPreconditioner<T>>,
    batch_size: usize,
    epochs: usize,
    learning_rate: f64,
}

impl<T: Real> Ep2Solver<T> {
    pub fn new(centers: &DMatrix<T>, spec: &KernelSpec, cfg: &Ep2Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let p = centers.nrows();
        if p == 0 {
            return input("preconditioned SGD needs at least one point");
        }
        let (default_s, default_q) = default_size_and_level(p);
        let s = cfg.nystrom_size.unwrap_or(default_s).min(p).max(1);
        let q = cfg.level.unwrap_or(default_q);
        if q > 0 && q >= s {
            return input(format!("inexact projection needs level < Nyström size, got q={q}, s={s}"));
        }
        let (precond, lambda) = if q > 0 {
            let pre = NystromPreconditioner::build(centers, spec, s, q, seed)?;
            let lambda = pre.lambda_next().as_f64();
            (Some(pre), lambda)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = rand::seq::index::sample(&mut rng, p, s).into_vec();
            let sub = select_rows(centers, &idx);
            let (values, _) = sorted_eigen(&kernel_matrix_unchecked(spec, &sub, &sub))?;
            (None, values[0].as_f64())
        };
        let batch_size = cfg.batch_size.unwrap_or_else(|| critical_batch_size(s, lambda)).min(p);
        let learning_rate = cfg.learning_rate.unwrap_or_else(|| spectral_step_size(batch_size, s, lambda));
        let gram = (p <= GRAM_CACHE_LIMIT).then(|| kernel_matrix_unchecked(spec, centers, centers));
        Ok(Self { spec: *spec, centers: centers.clone(), gram, precond, batch_size, epochs: cfg.epochs, learning_rate })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn halve_learning_rate(&mut self) {
        self.learning_rate /= 2.0;
    }

    pub fn preconditioner(&self) -> Option<&NystromPreconditioner<T>> {
        self.precond.as_ref()
    }

    pub fn centers(&self) -> &DMatrix<T> {
        &self.centers
    }

    /// Runs the configured number of epochs from zero weights against targets
    /// `y`. Returns the weights and the multiply-accumulate count.
    pub fn solve(&self, y: &DMatrix<T>, seed: u64) -> Result<(DMatrix<T>, u64)> {
        self.solve_epochs(y, self.epochs, seed)
    }

    pub fn solve_epochs(&self, y: &DMatrix<T>, epochs: usize, seed: u64) -> Result<(DMatrix<T>, u64)> {
        let p = self.centers.nrows();
        if y.nrows() != p {
            return input(format!("preconditioned SGD: {p} points but {} target rows", y.nrows()));
        }
        let c = y.ncols();
        let eta = T::of_f64(self.learning_rate);
        let mut alpha = DMatrix::<T>::zeros(p, c);
        let mut macs = 0u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..p).collect();
        let mut guard = DivergenceGuard::smoothed(0.1);
        // Batch losses are scaled by their value at zero weights; the floor
        // keeps near-zero target rows from dominating.
        let total = y.norm_squared().as_f64();
        if total == 0.0 {
            return Ok((alpha, macs));
        }
        let floor = 1e-3 * total / p as f64;
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(self.batch_size) {
                let xb = select_rows(&self.centers, batch);
                let m = batch.len();
                let k_b = match &self.gram {
                    Some(gram) => select_rows(gram, batch),
                    None => kernel_matrix_unchecked(&self.spec, &xb, &self.centers),
                };
                let mut g = k_b * &alpha;
                macs += (m * p) as u64;
                for (r, &i) in batch.iter().enumerate() {
                    for j in 0..c {
                        g[(r, j)] -= y[(i, j)];
                    }
                }
                let loss = g.norm_squared().as_f64() / m as f64;
                let baseline = batch.iter().map(|&i| y.row(i).norm_squared().as_f64()).sum::<f64>() / m as f64;
                if guard.observe(loss / baseline.max(floor)) {
                    return numeric(format!(
                        "preconditioned SGD diverged in epoch {epoch} (batch loss {loss:.3e}); \
                         use a smaller learning rate than {:.3e}",
                        self.learning_rate
                    ));
                }
                for (r, &i) in batch.iter().enumerate() {
                    for j in 0..c {
                        alpha[(i, j)] -= eta * g[(r, j)];
                    }
                }
                if let Some(pre) = &self.precond {
                    let (s, q) = (pre.size(), pre.level());
                    let h1 = pre.correction_coeffs(&xb, &g)?;
                    let delta = pre.f() * h1;
                    macs += (m * s + 2 * s * q) as u64;
                    for (k, &i) in pre.indices().iter().enumerate() {
                        for j in 0..c {
                            alpha[(i, j)] += eta * delta[(k, j)];
                        }
                    }
                }
            }
        }
        Ok((alpha, macs))
    }
}

/// Preconditioned SGD on the kernel regression `(x, y)` with centers `x`.
#[allow(clippy::too_many_arguments)]
pub fn ep2_solve<T: Real>(
    x: &DMatrix<T>,
    y: &DMatrix<T>,
    spec: &KernelSpec,
    nystrom_size: usize,
    level: usize,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<DMatrix<T>> {
    if level > 0 && level >= nystrom_size {
        return input(format!("need level < Nyström size, got q={level}, s={nystrom_size}"));
    }
    if nystrom_size > x.nrows() {
        return input(format!("Nyström size {nystrom_size} exceeds point count {}", x.nrows()));
    }
    let cfg = Ep2Config {
        epochs,
        batch_size: Some(batch_size),
        nystrom_size: Some(nystrom_size),
        level: Some(level),
        learning_rate: None,
    };
    let solver = Ep2Solver::new(x, spec, &cfg, seed)?;
    solver.solve(y, seed.wrapping_add(1)).map(|(alpha, _)| alpha)
}

/// Approximate projection: treats `(Z, h)` as a regression problem.
pub fn project_inexact<T: Real>(solver: &Ep2Solver<T>, h: &DMatrix<T>, seed: u64) -> Result<DMatrix<T>> {
    solver.solve(h, seed).map(|(theta, _)| theta)
}
