mod checks;
mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use config::{load_data, CsvArgs, Resolved, TrainArgs};
use kslv::bench::{run_bench, write_csv, write_metrics, BenchConfig, BenchMethod};
use kslv::data::{metrics, Dataset, Metrics};
use kslv::kernel::cast;
use kslv::{train, KernelModel, Precision, Real};
use serde::Serialize;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "kslv", version, about = "Kernel models trained with delayed-projection preconditioned SGD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write it with a JSON report.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Score a saved model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: String,
        #[command(flatten)]
        csv: CsvArgs,
    },
    /// Sweep center counts across methods and write plot-ready tables.
    Bench {
        #[command(flatten)]
        args: TrainArgs,
        /// Comma-separated center counts.
        #[arg(long, value_delimiter = ',', default_values_t = [50usize, 100, 200, 400])]
        p: Vec<usize>,
        /// Comma-separated methods: ep4, ep3, direct.
        #[arg(long, value_delimiter = ',', default_values = ["ep4", "ep3", "direct"])]
        methods: Vec<BenchMethod>,
        /// Largest center count the direct solve accepts.
        #[arg(long)]
        direct_limit: Option<usize>,
        /// Run the sweep entries concurrently.
        #[arg(long)]
        parallel: bool,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
    },
    /// Run the oracle self-check suite.
    OracleCheck {
        /// Monte Carlo trials for the variance check.
        #[arg(long, default_value_t = checks::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take kernel and centers from a saved model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Summary<'a> {
    data: &'a str,
    train: Metrics,
    holdout: Option<Metrics>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train { args, out } => cmd_train(&args, &out),
        Command::Eval { model, data, csv } => cmd_eval(&model, &data, &csv),
        Command::Bench { args, p, methods, direct_limit, parallel, out } => {
            cmd_bench(&args, p, methods, direct_limit, parallel, &out)
        }
        Command::OracleCheck { trials, seed, model } => cmd_oracle_check(trials, seed, model.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("KSLV_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.trim().parse().ok().filter(|&t| t > 0).ok_or_else(|| anyhow!("KSLV_THREADS must be a positive integer, got '{value}'"))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("configuring thread pool")
}

fn datasets(r: &Resolved, csv: &CsvArgs) -> Result<(Dataset, Option<Dataset>)> {
    let data = load_data(&r.data, csv)?;
    if r.holdout > 0.0 {
        let (train, hold) = data.split(r.holdout, r.train.seed)?;
        Ok((train, Some(hold)))
    } else {
        Ok((data, None))
    }
}

fn cmd_train(args: &TrainArgs, out: &Path) -> Result<bool> {
    let r = args.resolve()?;
    let p = r.centers.ok_or_else(|| anyhow!("--centers is required"))?;
    let (data, hold) = datasets(&r, &args.csv)?;
    if p == 0 || p > data.len() {
        bail!("--centers must be in 1..={}, got {p}", data.len());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match r.train.precision {
        Precision::F64 => train_with::<f64>(&r, p, &data, hold.as_ref(), out),
        Precision::F32 => train_with::<f32>(&r, p, &data, hold.as_ref(), out),
    }?;
    Ok(true)
}

fn train_with<T: Real>(r: &Resolved, p: usize, data: &Dataset, hold: Option<&Dataset>, out: &Path) -> Result<()> {
    let x: nalgebra::DMatrix<T> = cast(&data.x);
    let y = cast(&data.targets.matrix());
    let z = x.rows(0, p).into_owned();
    let report = train(&x, &y, &z, &r.spec, &r.train)?;
    let model = &report.model;
    let summary = Summary {
        data: &r.data,
        train: metrics(&model.predict(&x)?, &data.targets)?,
        holdout: hold.map(|h| metrics(&model.predict(&cast(&h.x))?, &h.targets)).transpose()?,
    };
    model.save(&out.join("model.bin"))?;
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_eval(model: &Path, data: &str, csv: &CsvArgs) -> Result<bool> {
    let model = KernelModel::<f64>::load(model).with_context(|| format!("loading {}", model.display()))?;
    let data = load_data(data, csv)?;
    let m = metrics(&model.predict(&data.x)?, &data.targets)?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(true)
}

fn cmd_bench(
    args: &TrainArgs,
    p: Vec<usize>,
    methods: Vec<BenchMethod>,
    direct_limit: Option<usize>,
    parallel: bool,
    out: &Path,
) -> Result<bool> {
    let r = args.resolve()?;
    let (data, hold) = datasets(&r, &args.csv)?;
    let mut cfg = BenchConfig { methods, centers: p, train: r.train.clone(), parallel, ..Default::default() };
    if let Some(limit) = direct_limit {
        cfg.direct_limit = limit;
    }
    let runs = match r.train.precision {
        Precision::F64 => run_bench::<f64>(&data, hold.as_ref(), &r.spec, &cfg),
        Precision::F32 => run_bench::<f32>(&data, hold.as_ref(), &r.spec, &cfg),
    }?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&runs, BufWriter::new(File::create(out.join("bench.csv"))?))?;
    write_metrics(&runs, BufWriter::new(File::create(out.join("metrics.csv"))?))?;
    for run in &runs {
        let r = &run.row;
        println!("{:<6} p={:<5} T={:<3} flops={:<14} wall={:.1}ms", r.method, r.p, r.period, r.flops, r.wall_ms);
    }
    Ok(true)
}

fn cmd_oracle_check(trials: usize, seed: u64, model: Option<&Path>) -> Result<bool> {
    if trials < 2 {
        bail!("--trials must be at least 2");
    }
    let inst = match model {
        Some(path) => {
            let model = KernelModel::<f64>::load(path).with_context(|| format!("loading {}", path.display()))?;
            checks::Instance::from_model(&model, seed)
        }
        None => checks::Instance::synthetic(seed)?,
    };
    let results = checks::run_all(&inst, trials, seed);
    for c in &results {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(results.iter().all(|c| c.pass))
}
