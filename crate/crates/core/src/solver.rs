//! Delayed-projection preconditioned SGD for general kernel models.
//!
//! Each batch extends an auxiliary model with temporary centers and Nyström
//! weights and accumulates the gradient at the model centers. Every `period`
//! batches the accumulated gradient is projected onto the span of the centers
//! and merged into the model weights.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{CostModel, LineItem};
use crate::error::{input, numeric, Error, Result};
use crate::kernel::{kernel_matrix_unchecked, select_rows, KernelSpec};
use crate::model::{classify, predict_auxiliary, AuxiliaryState, KernelModel};
use crate::preconditioner::{default_size_and_level, AttachedPreconditioner, NystromPreconditioner};
use crate::projection::{project_exact_counted, spectral_step_size, DivergenceGuard, Ep2Config, Ep2Solver};
use crate::real::{Precision, Real};

/// Report schema version written into JSON output.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Learning-rate halvings tolerated before training gives up.
const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ProjectionMode {
    /// Dense Cholesky solve; `jitter` defaults to `1e-8 * trace / p`.
    Exact {
        #[serde(default)]
        jitter: Option<f64>,
    },
    /// A few epochs of preconditioned SGD over the centers.
    Inexact(Ep2Config),
}

impl Default for ProjectionMode {
    fn default() -> Self {
        ProjectionMode::Inexact(Ep2Config::default())
    }
}

/// How the projected gradient is folded into the model weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// `alpha <- alpha + theta`: the projected function takes the auxiliary
    /// model's values at the centers.
    #[default]
    Evaluation,
    /// `alpha <- alpha - (n/m) * eta * theta`.
    ScaledListing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    /// Training points evaluated before and after each projection; 0 disables tracing.
    pub probe_size: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self { probe_size: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub nystrom_size: Option<usize>,
    pub level: Option<usize>,
    /// Projection period `T`; `None` selects the cost-optimal period.
    pub period: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub projection: ProjectionMode,
    pub merge: MergeRule,
    pub precision: Precision,
    pub trace: TraceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            nystrom_size: None,
            level: None,
            period: None,
            learning_rate: None,
            epochs: 10,
            seed: 0,
            projection: ProjectionMode::default(),
            merge: MergeRule::default(),
            precision: Precision::F64,
            trace: TraceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return input("batch size must be >= 1");
        }
        if self.epochs == 0 {
            return input("epochs must be >= 1");
        }
        if self.period == Some(0) {
            return input("projection period must be >= 1");
        }
        if let Some(eta) = self.learning_rate {
            if !(eta.is_finite() && eta > 0.0) {
                return input(format!("learning rate must be positive, got {eta}"));
            }
        }
        if let ProjectionMode::Inexact(ep2) = &self.projection {
            ep2.validate()?;
        }
        Ok(())
    }
}

/// Configuration values after defaults and automatic choices are resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config: TrainConfig,
    pub n: usize,
    pub dim: usize,
    pub outputs: usize,
    pub centers: usize,
    pub nystrom_size: usize,
    pub level: usize,
    pub period: usize,
    pub learning_rate: f64,
    pub kernel: KernelSpec,
}

/// A minibatch handed to [`ep4_step`].
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a, T: Real> {
    /// Global batch counter, used in error messages.
    pub index: usize,
    pub x: &'a DMatrix<T>,
    pub y: &'a DMatrix<T>,
}

/// What a step observed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo<T: Real> {
    /// Auxiliary-model residual on the batch, `f(X_m) - y_m`.
    pub gradient: DMatrix<T>,
    /// Mean squared residual per batch row.
    pub loss: f64,
}

/// Processes one minibatch without projecting.
///
/// The residual of the auxiliary model on the batch becomes the weight block
/// of a new temporary center set; the Nyström weights and the accumulated
/// gradient at the centers receive the preconditioner corrections.
pub fn ep4_step<T: Real>(
    model: &KernelModel<T>,
    state: &mut AuxiliaryState<T>,
    precond: &AttachedPreconditioner<T>,
    batch: Batch<'_, T>,
    learning_rate: T,
    period: usize,
    cost: &mut CostModel,
) -> Result<StepInfo<T>> {
    let (x_m, y_m) = (batch.x, batch.y);
    let m = x_m.nrows();
    let p = model.num_centers();
    let c = model.outputs();
    let base = &precond.base;
    let (s, q) = (base.size(), base.level());
    if state.batches_seen >= period {
        return input(format!("ep4_step: period of {period} batches is already full"));
    }
    if m == 0 || y_m.nrows() != m || y_m.ncols() != c || x_m.ncols() != model.dim() {
        return input(format!(
            "ep4_step: batch shapes {}x{} / {}x{} do not match model ({} dims, {} outputs)",
            x_m.nrows(),
            x_m.ncols(),
            y_m.nrows(),
            y_m.ncols(),
            model.dim(),
            c
        ));
    }
    if precond.centers_len() != p || state.accumulated.nrows() != p || state.nystrom_weights.nrows() != s {
        return input("ep4_step: state or preconditioner does not match the model");
    }
    let spec = model.spec();
    cost.begin_batch(m, state.batches_seen);

    let k_mz = kernel_matrix_unchecked(spec, x_m, model.centers());
    let mut g = &k_mz * model.weights() - y_m;
    cost.record(LineItem::OriginalModel, m, p);
    for (block, weights) in state.tmp_centers.iter().zip(&state.tmp_weights) {
        g += kernel_matrix_unchecked(spec, x_m, block) * weights;
        cost.record(LineItem::TemporaryModel, m, block.nrows());
    }
    g += kernel_matrix_unchecked(spec, x_m, base.subsample()) * &state.nystrom_weights;
    cost.record(LineItem::NystromModel, m, s);

    if g.iter().any(|v| !v.is_finite()) {
        cost.abandon_batch();
        let max_abs = g.iter().fold(0.0f64, |acc, v| if v.is_finite() { acc.max(v.as_f64().abs()) } else { f64::INFINITY });
        return numeric(format!(
            "non-finite gradient at batch {} (max |g| = {max_abs:.3e})",
            batch.index
        ));
    }
    let loss = g.norm_squared().as_f64() / m as f64;

    state.tmp_centers.push(x_m.clone());
    state.tmp_weights.push(&g * (-learning_rate));

    let h1 = base.correction_coeffs(x_m, &g)?;
    cost.record(LineItem::CorrectionCoeffs, s, m);
    cost.record(LineItem::CorrectionCoeffs, q, s);

    state.nystrom_weights += (base.f() * &h1) * learning_rate;
    cost.record(LineItem::NystromUpdate, s, q);

    state.accumulated -= k_mz.tr_mul(&g) * learning_rate;
    cost.record(LineItem::GradientAtCenters, p, m);

    state.accumulated += (&precond.m * &h1) * learning_rate;
    cost.record(LineItem::CenterCorrection, p, q);

    state.batches_seen += 1;
    cost.end_batch();
    Ok(StepInfo { gradient: g, loss })
}

/// Projection backend fixed for a training run.
#[derive(Debug, Clone)]
pub enum Projector<T: Real> {
    Exact { jitter: Option<f64> },
    Inexact(Ep2Solver<T>),
}

impl<T: Real> Projector<T> {
    pub fn new(mode: &ProjectionMode, centers: &DMatrix<T>, spec: &KernelSpec, seed: u64) -> Result<Self> {
        Ok(match mode {
            ProjectionMode::Exact { jitter } => Projector::Exact { jitter: *jitter },
            ProjectionMode::Inexact(cfg) => Projector::Inexact(Ep2Solver::new(centers, spec, cfg, seed)?),
        })
    }

    /// Solves `K(Z, Z) theta = h`; returns `theta` and its multiply-accumulate
    /// count. A diverging inexact solve is retried with half the step size,
    /// which is kept for later projections.
    pub fn project(&mut self, centers: &DMatrix<T>, spec: &KernelSpec, h: &DMatrix<T>, seed: u64) -> Result<(DMatrix<T>, u64)> {
        match self {
            Projector::Exact { jitter } => project_exact_counted(centers, spec, h, *jitter),
            Projector::Inexact(solver) => {
                let mut attempts = 0;
                loop {
                    match solver.solve(h, seed) {
                        Err(Error::Numeric(_)) if attempts < MAX_HALVINGS => {
                            solver.halve_learning_rate();
                            attempts += 1;
                        }
                        outcome => return outcome,
                    }
                }
            }
        }
    }
}

/// Merge parameters for [`finalize_period`].
#[derive(Debug, Clone, Copy)]
pub struct MergeParams<T: Real> {
    pub rule: MergeRule,
    pub learning_rate: T,
    /// `n / m`, used by [`MergeRule::ScaledListing`].
    pub batches_per_epoch: f64,
}

/// Projects the accumulated gradient, merges it into the model and resets the state.
pub fn finalize_period<T: Real>(
    model: &mut KernelModel<T>,
    state: &mut AuxiliaryState<T>,
    projector: &mut Projector<T>,
    merge: MergeParams<T>,
    seed: u64,
    cost: &mut CostModel,
) -> Result<()> {
    if state.batches_seen == 0 {
        return input("finalize_period: no batch processed since the last projection");
    }
    let spec = *model.spec();
    let (theta, macs) = projector.project(model.centers(), &spec, &state.accumulated, seed)?;
    cost.record_projection(macs);
    match merge.rule {
        MergeRule::Evaluation => *model.weights_mut() += theta,
        MergeRule::ScaledListing => {
            let scale = T::of_f64(merge.batches_per_epoch) * merge.learning_rate;
            *model.weights_mut() -= theta * scale;
        }
    }
    state.reset();
    Ok(())
}

/// Shuffled batch schedule of one epoch. The final batch is short when `m` does not divide `n`.
pub fn epoch_batches(n: usize, m: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks(m.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    PreProjection,
    PostProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    /// Batches processed so far in the run.
    pub step: usize,
    pub projection: usize,
    pub kind: TraceKind,
    pub mse: f64,
    pub accuracy: Option<f64>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub wall_ms: f64,
    pub batches: usize,
    pub projections: usize,
    pub mean_batch_loss: f64,
}

/// Outcome of a training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport<T: Real> {
    pub schema_version: u32,
    pub resolved: ResolvedConfig,
    pub epochs: Vec<EpochRecord>,
    pub batch_flops: Vec<u64>,
    pub projection_flops: Vec<u64>,
    pub total_flops: u64,
    pub learning_rate_halvings: usize,
    pub trace: Vec<TraceEntry>,
    #[serde(skip)]
    pub model: KernelModel<T>,
}

impl<T: Real> TrainReport<T> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn amortized_flops_per_batch(&self) -> f64 {
        if self.batch_flops.is_empty() {
            0.0
        } else {
            self.total_flops as f64 / self.batch_flops.len() as f64
        }
    }
}

/// Stateful driver of a training run.
pub struct Trainer<T: Real> {
    x: DMatrix<T>,
    y: DMatrix<T>,
    resolved: ResolvedConfig,
    model: KernelModel<T>,
    state: AuxiliaryState<T>,
    precond: AttachedPreconditioner<T>,
    projector: Projector<T>,
    learning_rate: f64,
    cost: CostModel,
    guard: DivergenceGuard,
    period_losses: Vec<f64>,
    /// Weights at the start of the last period whose loss passed the guard.
    checkpoint: DMatrix<T>,
    epoch_loss: f64,
    halvings: usize,
    projections: usize,
    steps: usize,
    epoch: usize,
    probe: Option<(DMatrix<T>, DMatrix<T>)>,
    trace: Vec<TraceEntry>,
    started: Instant,
}

impl<T: Real> Trainer<T> {
    /// Sets up preconditioner, projection backend, step size and period.
    pub fn new(x: DMatrix<T>, y: DMatrix<T>, centers: DMatrix<T>, spec: KernelSpec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, d) = x.shape();
        if n == 0 || d == 0 {
            return input("training data is empty");
        }
        if y.nrows() != n || y.ncols() == 0 {
            return input(format!("targets have shape {:?}, expected {n} rows", y.shape()));
        }
        if centers.ncols() != d || centers.nrows() == 0 {
            return input(format!(
                "centers have shape {:?}, expected at least one row of dimension {d}",
                centers.shape()
            ));
        }
        if x.iter().chain(y.iter()).chain(centers.iter()).any(|v| !v.is_finite()) {
            return input("training data contains non-finite values");
        }
        let p = centers.nrows();
        let c = y.ncols();
        let (default_s, default_q) = default_size_and_level(n);
        let s = cfg.nystrom_size.unwrap_or(default_s);
        let q = cfg.level.unwrap_or(default_q.min(s.saturating_sub(1)));
        if q == 0 || q >= s || s > n {
            return input(format!("need 1 <= q < s <= n, got q={q}, s={s}, n={n}"));
        }
        let m = cfg.batch_size.min(n);

        let pre = NystromPreconditioner::build(&x, &spec, s, q, cfg.seed)?;
        let precond = pre.attach(&centers)?;
        let projector = Projector::new(&cfg.projection, &centers, &spec, cfg.seed.wrapping_add(0x5EED))?;

        let learning_rate =
            cfg.learning_rate.unwrap_or_else(|| spectral_step_size(m, s, pre.lambda_next().as_f64()));
        let period = cfg.period.unwrap_or_else(|| {
            let ep2_epochs = match &cfg.projection {
                ProjectionMode::Inexact(ep2) => ep2.epochs as f64,
                // A dense solve costs about p/3 passes over K(Z, Z).
                ProjectionMode::Exact { .. } => p as f64 / 3.0,
            };
            crate::cost::optimal_period(p, m, ep2_epochs)
        });

        let probe = if cfg.trace.probe_size > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9B0BE));
            let idx = rand::seq::index::sample(&mut rng, n, cfg.trace.probe_size.min(n)).into_vec();
            Some((select_rows(&x, &idx), select_rows(&y, &idx)))
        } else {
            None
        };

        let resolved = ResolvedConfig {
            config: cfg,
            n,
            dim: d,
            outputs: c,
            centers: p,
            nystrom_size: s,
            level: q,
            period,
            learning_rate,
            kernel: spec,
        };
        Ok(Self {
            checkpoint: DMatrix::zeros(p, c),
            model: KernelModel::zeros(spec, centers, c)?,
            state: AuxiliaryState::new(p, s, c),
            x,
            y,
            resolved,
            precond,
            projector,
            learning_rate,
            cost: CostModel::new(),
            guard: DivergenceGuard::new(),
            period_losses: Vec::new(),
            epoch_loss: 0.0,
            halvings: 0,
            projections: 0,
            steps: 0,
            epoch: 0,
            probe,
            trace: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &KernelModel<T> {
        &self.model
    }

    pub fn state(&self) -> &AuxiliaryState<T> {
        &self.state
    }

    pub fn preconditioner(&self) -> &AttachedPreconditioner<T> {
        &self.precond
    }

    pub fn projector(&self) -> &Projector<T> {
        &self.projector
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn period(&self) -> usize {
        self.resolved.period
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn resolved(&self) -> &ResolvedConfig {
        &self.resolved
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn halvings(&self) -> usize {
        self.halvings
    }

    /// Batch schedule for an epoch of this run.
    pub fn batches_for_epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        epoch_batches(self.resolved.n, self.resolved.config.batch_size.min(self.resolved.n), self.resolved.config.seed, epoch)
    }

    /// Processes the training rows `rows` as one batch, projecting when the
    /// period fills. A short batch always starts a fresh period so that the
    /// temporary-center count stays a multiple of the full batch size.
    pub fn step(&mut self, rows: &[usize]) -> Result<()> {
        if rows.is_empty() {
            return input("empty batch");
        }
        let full = self.resolved.config.batch_size.min(self.resolved.n);
        if rows.len() < full && self.state.batches_seen > 0 {
            self.project()?;
        }
        let xb = select_rows(&self.x, rows);
        let yb = select_rows(&self.y, rows);
        let batch = Batch { index: self.steps, x: &xb, y: &yb };
        let eta = T::of_f64(self.learning_rate);
        let outcome = ep4_step(&self.model, &mut self.state, &self.precond, batch, eta, self.resolved.period, &mut self.cost);
        self.steps += 1;
        match outcome {
            Ok(info) => {
                self.epoch_loss += info.loss;
                self.period_losses.push(info.loss);
            }
            Err(Error::Numeric(_)) => return self.restart_period(),
            Err(e) => return Err(e),
        }
        if self.state.batches_seen >= self.resolved.period {
            self.project()?;
        }
        Ok(())
    }

    /// Projects whatever the current period holds. No-op on an empty period.
    pub fn project(&mut self) -> Result<()> {
        if self.state.batches_seen == 0 {
            return Ok(());
        }
        let mean = self.period_losses.iter().sum::<f64>() / self.period_losses.len().max(1) as f64;
        if self.guard.observe(mean) {
            return self.restart_period();
        }
        self.period_losses.clear();
        self.checkpoint.copy_from(self.model.weights());
        self.record_trace(TraceKind::PreProjection)?;
        let merge = MergeParams {
            rule: self.resolved.config.merge,
            learning_rate: T::of_f64(self.learning_rate),
            batches_per_epoch: self.resolved.n as f64 / self.resolved.config.batch_size.min(self.resolved.n) as f64,
        };
        let seed = self.resolved.config.seed.wrapping_add(1 + self.projections as u64);
        finalize_period(&mut self.model, &mut self.state, &mut self.projector, merge, seed, &mut self.cost)?;
        self.projections += 1;
        self.record_trace(TraceKind::PostProjection)
    }

    /// Discards the current period, returns to the weights of the last period
    /// that passed the loss check and halves the learning rate.
    ///
    /// The loss of a period is measured on the weights it started from, so a
    /// bad merge is only seen one period later.
    fn restart_period(&mut self) -> Result<()> {
        self.state.reset();
        self.model.weights_mut().copy_from(&self.checkpoint);
        self.period_losses.clear();
        self.halvings += 1;
        self.learning_rate /= 2.0;
        if self.halvings > MAX_HALVINGS {
            return numeric(format!(
                "training diverged: learning rate halved {MAX_HALVINGS} times (now {:.3e})",
                self.learning_rate
            ));
        }
        Ok(())
    }

    fn record_trace(&mut self, kind: TraceKind) -> Result<()> {
        let Some((px, py)) = &self.probe else { return Ok(()) };
        let pred = match kind {
            TraceKind::PreProjection => predict_auxiliary(&self.model, &self.state, &self.precond.base, px)?,
            TraceKind::PostProjection => self.model.predict(px)?,
        };
        let (mse, accuracy) = probe_metrics(&pred, py);
        self.trace.push(TraceEntry {
            epoch: self.epoch,
            step: self.steps,
            projection: self.projections,
            kind,
            mse,
            accuracy,
            elapsed_ms: self.started.elapsed().as_secs_f64() * 1e3,
        });
        Ok(())
    }

    /// Runs one epoch and forces a projection at its end.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epoch;
        let schedule = self.batches_for_epoch(epoch);
        let batches_before = self.cost.batches().len();
        let projections_before = self.projections;
        self.epoch_loss = 0.0;
        for rows in &schedule {
            self.step(rows)?;
        }
        self.project()?;
        self.epoch += 1;
        let batches = self.cost.batches().len() - batches_before;
        Ok(EpochRecord {
            epoch,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            batches,
            projections: self.projections - projections_before,
            mean_batch_loss: self.epoch_loss / schedule.len().max(1) as f64,
        })
    }

    pub fn run(mut self) -> Result<TrainReport<T>> {
        let mut epochs = Vec::with_capacity(self.resolved.config.epochs);
        for _ in 0..self.resolved.config.epochs {
            epochs.push(self.run_epoch()?);
        }
        Ok(self.into_report(epochs))
    }

    pub fn into_report(self, epochs: Vec<EpochRecord>) -> TrainReport<T> {
        let mut resolved = self.resolved;
        resolved.learning_rate = self.learning_rate;
        TrainReport {
            schema_version: REPORT_SCHEMA_VERSION,
            resolved,
            epochs,
            batch_flops: self.cost.batches().iter().map(|b| b.total()).collect(),
            projection_flops: self.cost.projections().to_vec(),
            total_flops: self.cost.total(),
            learning_rate_halvings: self.halvings,
            trace: self.trace,
            model: self.model,
        }
    }
}

/// Mean squared error over all entries, and argmax accuracy when there are
/// at least two output columns.
fn probe_metrics<T: Real>(pred: &DMatrix<T>, targets: &DMatrix<T>) -> (f64, Option<f64>) {
    let n = pred.len().max(1) as f64;
    let mse = pred.iter().zip(targets.iter()).map(|(a, b)| (*a - *b).as_f64().powi(2)).sum::<f64>() / n;
    let accuracy = if pred.ncols() >= 2 {
        match (classify(pred), classify(targets)) {
            (Ok(a), Ok(b)) => {
                Some(a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / a.len().max(1) as f64)
            }
            _ => None,
        }
    } else {
        None
    };
    (mse, accuracy)
}

/// Trains a model on `(x, y)` with centers `centers`.
pub fn train<T: Real>(
    x: &DMatrix<T>,
    y: &DMatrix<T>,
    centers: &DMatrix<T>,
    spec: &KernelSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport<T>> {
    Trainer::new(x.clone(), y.clone(), centers.clone(), *spec, cfg.clone())?.run()
}
