//! Self-check suite run by `kslv oracle-check`.

use anyhow::Result;
use kslv::data::synth_blobs;
use kslv::oracle::{ep4_exact_iterate, fixed_point_solution, iteration_spectral_radius, min_norm_solution, FixedPointOperator};
use kslv::projection::Ep2Config;
use kslv::solver::TraceConfig;
use kslv::{kernel_matrix, train, KernelModel, KernelSpec, ProjectionMode, TrainConfig, Trainer};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const DEFAULT_TRIALS: usize = 10_000;

pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// Kernel and centers the fixed-point checks run on.
pub struct Instance {
    pub spec: KernelSpec,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl Instance {
    pub fn synthetic(seed: u64) -> Result<Self> {
        let x = synth_blobs(120, 3, 3, 1.0, seed)?.x;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let z = DMatrix::from_fn(20, 3, |i, j| x[(i * 6, j)] + 0.05 * normal(&mut rng));
        Ok(Self { spec: KernelSpec::laplace(3f64.sqrt())?, x, z })
    }

    /// Centers from a stored model, with data scattered around them.
    pub fn from_model(model: &KernelModel<f64>, seed: u64) -> Self {
        let p = model.num_centers().min(30);
        let z = model.centers().rows(0, p).into_owned();
        let scale = model.spec().bandwidth() * 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(4 * p, z.ncols(), |i, j| z[(i / 4, j)] + scale * normal(&mut rng));
        Self { spec: *model.spec(), x, z }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn outcome(name: &'static str, result: Result<(bool, String)>) -> Check {
    match result {
        Ok((pass, detail)) => Check { name, pass, detail },
        Err(e) => Check { name, pass: false, detail: format!("error: {e:#}") },
    }
}

/// Monte Carlo tolerance on the relative variance error; widens as trials drop.
pub fn variance_tolerance(trials: usize) -> f64 {
    (3.5 * (2.0 / trials as f64).sqrt()).max(0.05)
}

pub fn run_all(inst: &Instance, trials: usize, seed: u64) -> Vec<Check> {
    vec![
        outcome("fixed point", fixed_point(inst, seed)),
        outcome("noise variance", noise_variance(inst, trials, seed)),
        outcome("projected special case", ep3_equivalence(&inst.spec, inst.x.ncols(), seed)),
        outcome("min-norm convergence", min_norm(&inst.spec, inst.x.ncols(), seed)),
    ]
}

fn fixed_point(inst: &Instance, seed: u64) -> Result<(bool, String)> {
    let rho = iteration_spectral_radius(&inst.x, &inst.z, &inst.spec)?;
    if rho >= 1.0 {
        return Ok((false, format!("iteration does not contract: spectral radius {rho:.3}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = DMatrix::from_fn(inst.x.nrows(), 2, |_, _| normal(&mut rng));
    let target = fixed_point_solution(&inst.x, &y, &inst.z, &inst.spec)?;
    let iters = (40.0 / (1.0 - rho)).ceil().min(5000.0) as usize;
    let last = ep4_exact_iterate(&inst.x, &y, &inst.z, &inst.spec, iters)?.pop().expect("at least one iterate");
    let err = rel(&last, &target);
    Ok((err <= 1e-6, format!("{iters} iterations, radius {rho:.3}, relative error {err:.1e}")))
}

fn noise_variance(inst: &Instance, trials: usize, seed: u64) -> Result<(bool, String)> {
    let op = FixedPointOperator::new(&inst.x, &inst.z, &inst.spec)?;
    let n = inst.x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut total = 0.0;
    let mut done = 0;
    while done < trials {
        let chunk = (trials - done).min(1000);
        let noise = DMatrix::from_fn(n, chunk, |_, _| normal(&mut rng));
        total += op.solve(&noise)?.norm_squared();
        done += chunk;
    }
    let empirical = total / trials as f64;
    let limit = op.noise_variance();
    let dev = (empirical - limit).abs() / limit;
    let tol = variance_tolerance(trials);
    Ok((dev <= tol, format!("{trials} trials, deviation {:.2}% (tolerance {:.1}%)", 100.0 * dev, 100.0 * tol)))
}

/// Period one with exact projection against the explicit update
/// `alpha -= eta * K(Z,Z)^-1 (P K(., X_m) g)(Z)`.
fn ep3_equivalence(spec: &KernelSpec, d: usize, seed: u64) -> Result<(bool, String)> {
    let data = synth_blobs(100, d, 3, 0.5, seed)?;
    let y = data.targets.matrix();
    let z = data.x.rows(0, 30).into_owned();
    let eta = 0.5;
    let cfg = TrainConfig {
        batch_size: 10,
        nystrom_size: Some(25),
        level: Some(5),
        period: Some(1),
        learning_rate: Some(eta),
        epochs: 3,
        seed,
        projection: ProjectionMode::Exact { jitter: Some(0.0) },
        trace: TraceConfig { probe_size: 0 },
        ..Default::default()
    };
    let mut t = Trainer::new(data.x.clone(), y.clone(), z.clone(), *spec, cfg)?;
    let pre = t.preconditioner().base.clone();
    let k_zz = kernel_matrix(spec, &z, &z)?
        .cholesky()
        .ok_or_else(|| anyhow::anyhow!("center kernel matrix is not positive definite"))?;
    let mut alpha = DMatrix::zeros(30, y.ncols());
    let mut worst = 0.0f64;
    let mut steps = 0;
    for epoch in 0..3 {
        for rows in t.batches_for_epoch(epoch) {
            let xb = kslv::kernel::select_rows(&data.x, &rows);
            let g = kernel_matrix(spec, &xb, &z)? * &alpha - kslv::kernel::select_rows(&y, &rows);
            alpha -= k_zz.solve(&pre.apply_action(&xb, &g, &z)?) * eta;
            t.step(&rows)?;
            worst = worst.max(rel(t.model().weights(), &alpha));
            steps += 1;
        }
    }
    Ok((worst <= 1e-8, format!("{steps} steps, worst relative error {worst:.1e}")))
}

fn min_norm(spec: &KernelSpec, d: usize, seed: u64) -> Result<(bool, String)> {
    let data = synth_blobs(360, d, 3, 0.1, seed)?;
    let (tr, hold) = data.split(1.0 / 6.0, seed)?;
    let y = tr.targets.matrix();
    let z = tr.x.rows(0, 60).into_owned();
    let cfg = TrainConfig {
        batch_size: 50,
        epochs: 50,
        seed,
        projection: ProjectionMode::Inexact(Ep2Config { epochs: 8, ..Default::default() }),
        trace: TraceConfig { probe_size: 0 },
        ..Default::default()
    };
    let report = train(&tr.x, &y, &z, spec, &cfg)?;
    let oracle = kernel_matrix(spec, &hold.x, &z)? * min_norm_solution(&tr.x, &y, &z, spec)?;
    let err = rel(&report.model.predict(&hold.x)?, &oracle);
    Ok((err <= 0.02, format!("holdout prediction gap {:.2}%", 100.0 * err)))
}
