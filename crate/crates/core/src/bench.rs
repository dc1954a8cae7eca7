//! Benchmark sweeps over the center count: delayed projection, projection
//! after every batch, and a dense direct solve.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{metrics, Dataset};
use crate::error::{input, Error, Result};
use crate::kernel::{cast, kernel_matrix, select_rows, KernelSpec};
use crate::linalg::spd_solve;
use crate::model::KernelModel;
use crate::real::Real;
use crate::solver::{TraceEntry, TraceKind, TrainConfig, Trainer};

/// Column names of the benchmark table.
pub const CSV_HEADER: [&str; 11] =
    ["method", "p", "m", "s", "q", "T", "epochs", "wall_ms", "flops", "train_acc", "test_acc"];

/// Column names of the long-format metrics table.
pub const METRICS_HEADER: [&str; 9] = ["method", "p", "epoch", "step", "projection", "phase", "mse", "accuracy", "elapsed_ms"];

/// Default largest center count for the direct solve.
pub const DIRECT_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMethod {
    /// Projection period from the configuration (usually automatic).
    Ep4,
    /// Projection after every batch.
    Ep3,
    /// Dense least-squares solve for the center weights.
    Direct,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Ep4 => "ep4",
            BenchMethod::Ep3 => "ep3",
            BenchMethod::Direct => "direct",
        }
    }
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ep4" => Ok(BenchMethod::Ep4),
            "ep3" => Ok(BenchMethod::Ep3),
            "direct" => Ok(BenchMethod::Direct),
            other => input(format!("unknown bench method '{other}' (expected ep4, ep3 or direct)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub methods: Vec<BenchMethod>,
    /// Center counts; centers are the leading rows of the training set.
    pub centers: Vec<usize>,
    pub train: TrainConfig,
    pub direct_limit: usize,
    /// Run the sweep entries concurrently.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![BenchMethod::Ep4, BenchMethod::Ep3, BenchMethod::Direct],
            centers: vec![50, 100, 200, 400],
            train: TrainConfig::default(),
            direct_limit: DIRECT_LIMIT,
            parallel: false,
        }
    }
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: BenchMethod,
    pub p: usize,
    pub m: usize,
    pub s: usize,
    pub q: usize,
    #[serde(rename = "T")]
    pub period: usize,
    pub epochs: usize,
    pub wall_ms: f64,
    /// Multiply-accumulate tally of the whole run.
    pub flops: u64,
    /// Minibatches processed; 0 for the direct solve.
    pub batches: usize,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

impl BenchRow {
    /// Tally divided by the number of minibatches.
    pub fn amortized_flops(&self) -> f64 {
        self.flops as f64 / self.batches.max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    pub row: BenchRow,
    pub trace: Vec<TraceEntry>,
}

/// Runs every (method, p) pair of the sweep in method-major order.
pub fn run_bench<T: Real>(train: &Dataset, test: Option<&Dataset>, spec: &KernelSpec, cfg: &BenchConfig) -> Result<Vec<BenchRun>> {
    cfg.train.validate()?;
    if let Some(&p) = cfg.centers.iter().find(|&&p| p == 0 || p > train.len()) {
        return input(format!("center count {p} must be in 1..={}", train.len()));
    }
    if cfg.methods.contains(&BenchMethod::Direct) {
        if let Some(&p) = cfg.centers.iter().find(|&&p| p > cfg.direct_limit) {
            return input(format!(
                "direct solve refuses {p} centers (limit {}); drop 'direct' from the methods or lower p",
                cfg.direct_limit
            ));
        }
    }
    let jobs: Vec<(BenchMethod, usize)> =
        cfg.methods.iter().flat_map(|&method| cfg.centers.iter().map(move |&p| (method, p))).collect();
    let run = |&(method, p): &(BenchMethod, usize)| run_one::<T>(method, p, train, test, spec, cfg);
    if cfg.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    }
}

fn run_one<T: Real>(
    method: BenchMethod,
    p: usize,
    train: &Dataset,
    test: Option<&Dataset>,
    spec: &KernelSpec,
    cfg: &BenchConfig,
) -> Result<BenchRun> {
    let start = Instant::now();
    let x: DMatrix<T> = cast(&train.x);
    let y: DMatrix<T> = cast(&train.targets.matrix());
    let centers = select_rows(&x, &(0..p).collect::<Vec<_>>());
    let accuracy = |model: &KernelModel<T>, data: &Dataset| -> Result<Option<f64>> {
        Ok(metrics(&model.predict(&cast(&data.x))?, &data.targets)?.accuracy)
    };
    let (row, trace) = match method {
        BenchMethod::Direct => {
            let (model, flops) = direct_solve(&x, &y, centers, spec)?;
            let row = BenchRow {
                method,
                p,
                m: 0,
                s: 0,
                q: 0,
                period: 0,
                epochs: 0,
                wall_ms: 0.0,
                flops,
                batches: 0,
                train_acc: accuracy(&model, train)?,
                test_acc: test.map(|t| accuracy(&model, t)).transpose()?.flatten(),
            };
            (row, Vec::new())
        }
        BenchMethod::Ep4 | BenchMethod::Ep3 => {
            let mut tc = cfg.train.clone();
            if method == BenchMethod::Ep3 {
                tc.period = Some(1);
            }
            let trainer = Trainer::new(x, y, centers, *spec, tc)?;
            let report = trainer.run()?;
            let r = &report.resolved;
            let row = BenchRow {
                method,
                p,
                m: r.config.batch_size.min(r.n),
                s: r.nystrom_size,
                q: r.level,
                period: r.period,
                epochs: r.config.epochs,
                wall_ms: 0.0,
                flops: report.total_flops,
                batches: report.batch_flops.len(),
                train_acc: accuracy(&report.model, train)?,
                test_acc: test.map(|t| accuracy(&report.model, t)).transpose()?.flatten(),
            };
            (row, report.trace)
        }
    };
    let mut row = row;
    row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(BenchRun { row, trace })
}

/// Least-squares weights from `(K(Z,X) K(X,Z) + jitter I) alpha = K(Z,X) Y`.
fn direct_solve<T: Real>(x: &DMatrix<T>, y: &DMatrix<T>, centers: DMatrix<T>, spec: &KernelSpec) -> Result<(KernelModel<T>, u64)> {
    let k_xz = kernel_matrix(spec, x, &centers)?;
    let normal = k_xz.tr_mul(&k_xz);
    let rhs = k_xz.tr_mul(y);
    let p = centers.nrows();
    let jitter = T::of_f64(1e-10) * normal.trace() / T::of_f64(p as f64);
    let (alpha, _) = spd_solve(&normal, &rhs, jitter, 3)?;
    let (n, p) = (x.nrows() as u64, p as u64);
    let flops = n * p * p + n * p + p * p * p / 3 + 2 * p * p;
    Ok((KernelModel::new(*spec, centers, alpha)?, flops))
}

fn opt(v: Option<f64>) -> String {
    v.map(|a| format!("{a}")).unwrap_or_default()
}

/// Writes the benchmark table with [`CSV_HEADER`] columns.
pub fn write_csv<W: Write>(runs: &[BenchRun], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for BenchRun { row: r, .. } in runs {
        w.write_record([
            r.method.name().to_string(),
            r.p.to_string(),
            r.m.to_string(),
            r.s.to_string(),
            r.q.to_string(),
            r.period.to_string(),
            r.epochs.to_string(),
            format!("{:.3}", r.wall_ms),
            r.flops.to_string(),
            opt(r.train_acc),
            opt(r.test_acc),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every trace entry, one row per (run, entry), with [`METRICS_HEADER`] columns.
pub fn write_metrics<W: Write>(runs: &[BenchRun], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for run in runs {
        for e in &run.trace {
            let phase = match e.kind {
                TraceKind::PreProjection => "pre",
                TraceKind::PostProjection => "post",
            };
            w.write_record([
                run.row.method.name().to_string(),
                run.row.p.to_string(),
                e.epoch.to_string(),
                e.step.to_string(),
                e.projection.to_string(),
                phase.to_string(),
                format!("{}", e.mse),
                opt(e.accuracy),
                format!("{:.3}", e.elapsed_ms),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return input("slope fit needs at least two paired points");
    }
    if xs.iter().chain(ys).any(|v| !(v.is_finite() && *v > 0.0)) {
        return input("slope fit needs positive finite values");
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return input("slope fit needs at least two distinct x values");
    }
    Ok(sxy / sxx)
}
