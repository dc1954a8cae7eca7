use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use kslv::data::{load_binary, load_csv_with, synth_blobs, Dataset, LabelKind};
use kslv::projection::Ep2Config;
use kslv::{KernelFamily, KernelSpec, MergeRule, Precision, ProjectionMode, TrainConfig};
use serde::Deserialize;
use std::path::{Path, PathBuf};

/// Flags shared by `train` and `bench`. Every flag overrides the value from `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// TOML file with defaults for the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `blobs:n=..,d=..,c=..[,spread=..,seed=..]`, a `.csv` file or a binary dataset.
    #[arg(long)]
    pub data: Option<String>,
    /// Number of centers, taken as the leading rows of the training set.
    #[arg(long)]
    pub centers: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    pub m: Option<usize>,
    /// Nyström subsample size.
    #[arg(long)]
    pub s: Option<usize>,
    /// Preconditioner level.
    #[arg(long)]
    pub q: Option<usize>,
    /// Projection period: `auto` or a positive integer.
    #[arg(long = "T", value_name = "auto|N")]
    pub period: Option<String>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// `exact` or `inexact`.
    #[arg(long)]
    pub proj: Option<String>,
    /// Diagonal jitter for exact projection.
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub ep2_epochs: Option<usize>,
    #[arg(long)]
    pub ep2_batch: Option<usize>,
    #[arg(long)]
    pub ep2_s: Option<usize>,
    #[arg(long)]
    pub ep2_q: Option<usize>,
    #[arg(long)]
    pub ep2_eta: Option<f64>,
    /// `laplace` or `gaussian`.
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// `f32` or `f64`.
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `evaluation` or `scaled-listing`.
    #[arg(long)]
    pub merge: Option<String>,
    /// Training points probed around each projection; 0 disables the trace.
    #[arg(long)]
    pub probe: Option<usize>,
    /// Fraction of the data held out for evaluation.
    #[arg(long)]
    pub holdout: Option<f64>,
    #[command(flatten)]
    pub csv: CsvArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CsvArgs {
    /// Treat the first CSV line as data rather than a header.
    #[arg(long)]
    pub no_header: bool,
    /// Label column of a CSV file; defaults to the last column.
    #[arg(long)]
    pub label_column: Option<usize>,
    /// Read CSV labels as real-valued targets.
    #[arg(long)]
    pub regression: bool,
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    data: Option<String>,
    centers: Option<usize>,
    kernel: Option<String>,
    bandwidth: Option<f64>,
    holdout: Option<f64>,
    train: TrainConfig,
}

/// Flags and file merged into concrete settings.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub data: String,
    pub centers: Option<usize>,
    pub spec: KernelSpec,
    pub holdout: f64,
    pub train: TrainConfig,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<Resolved> {
        let file = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str::<FileConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => FileConfig::default(),
        };
        let mut cfg = file.train;
        if let Some(m) = self.m {
            cfg.batch_size = m;
        }
        if self.s.is_some() {
            cfg.nystrom_size = self.s;
        }
        if self.q.is_some() {
            cfg.level = self.q;
        }
        if let Some(t) = &self.period {
            cfg.period = parse_period(t)?;
        }
        if self.eta.is_some() {
            cfg.learning_rate = self.eta;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = &self.precision {
            cfg.precision = p.parse::<Precision>().map_err(|e| anyhow!(e))?;
        }
        if let Some(m) = &self.merge {
            cfg.merge = parse_merge(m)?;
        }
        if let Some(probe) = self.probe {
            cfg.trace.probe_size = probe;
        }
        cfg.projection = self.projection(cfg.projection)?;
        cfg.validate()?;

        let data = self.data.clone().or(file.data).ok_or_else(|| anyhow!("--data is required"))?;
        let family = match self.kernel.as_ref().or(file.kernel.as_ref()) {
            Some(k) => k.parse::<KernelFamily>().map_err(|e| anyhow!(e))?,
            None => KernelFamily::Laplace,
        };
        let bandwidth = self.bandwidth.or(file.bandwidth).unwrap_or(1.0);
        let holdout = self.holdout.or(file.holdout).unwrap_or(0.0);
        if !(0.0..1.0).contains(&holdout) {
            bail!("--holdout must be in [0, 1), got {holdout}");
        }
        Ok(Resolved {
            data,
            centers: self.centers.or(file.centers),
            spec: KernelSpec::new(family, bandwidth)?,
            holdout,
            train: cfg,
        })
    }

    fn projection(&self, current: ProjectionMode) -> Result<ProjectionMode> {
        let mut mode = match self.proj.as_deref().map(str::to_ascii_lowercase).as_deref() {
            None => current,
            Some("exact") => match current {
                ProjectionMode::Exact { .. } => current,
                ProjectionMode::Inexact(_) => ProjectionMode::Exact { jitter: None },
            },
            Some("inexact") => match current {
                ProjectionMode::Inexact(_) => current,
                ProjectionMode::Exact { .. } => ProjectionMode::Inexact(Ep2Config::default()),
            },
            Some(other) => bail!("unknown projection '{other}' (expected exact or inexact)"),
        };
        match &mut mode {
            ProjectionMode::Exact { jitter } => {
                if self.jitter.is_some() {
                    *jitter = self.jitter;
                }
            }
            ProjectionMode::Inexact(ep2) => {
                if let Some(e) = self.ep2_epochs {
                    ep2.epochs = e;
                }
                if self.ep2_batch.is_some() {
                    ep2.batch_size = self.ep2_batch;
                }
                if self.ep2_s.is_some() {
                    ep2.nystrom_size = self.ep2_s;
                }
                if self.ep2_q.is_some() {
                    ep2.level = self.ep2_q;
                }
                if self.ep2_eta.is_some() {
                    ep2.learning_rate = self.ep2_eta;
                }
            }
        }
        Ok(mode)
    }
}

fn parse_period(s: &str) -> Result<Option<usize>> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(None);
    }
    match s.parse::<usize>() {
        Ok(t) if t >= 1 => Ok(Some(t)),
        _ => bail!("--T expects 'auto' or a positive integer, got '{s}'"),
    }
}

fn parse_merge(s: &str) -> Result<MergeRule> {
    match s.to_ascii_lowercase().replace('_', "-").as_str() {
        "evaluation" => Ok(MergeRule::Evaluation),
        "scaled-listing" => Ok(MergeRule::ScaledListing),
        other => bail!("unknown merge rule '{other}' (expected evaluation or scaled-listing)"),
    }
}

/// Loads the dataset named by a `--data` value.
pub fn load_data(source: &str, csv: &CsvArgs) -> Result<Dataset> {
    if let Some(params) = source.strip_prefix("blobs:") {
        return blobs(params);
    }
    let path = Path::new(source);
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        return load_binary(path).with_context(|| format!("loading {source}"));
    }
    let label = match csv.label_column {
        Some(c) => c,
        None => last_column(path)?,
    };
    let kind = if csv.regression { LabelKind::Real } else { LabelKind::Auto };
    load_csv_with(path, !csv.no_header, label, kind).with_context(|| format!("loading {source}"))
}

fn last_column(path: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).ok_or_else(|| anyhow!("{}: empty file", path.display()))?;
    Ok(first.split(',').count().saturating_sub(1))
}

fn blobs(params: &str) -> Result<Dataset> {
    let (mut n, mut d, mut c, mut spread, mut seed) = (None, None, None, 0.5, 0u64);
    for pair in params.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = pair.split_once('=').ok_or_else(|| anyhow!("blobs: expected key=value, got '{pair}'"))?;
        let bad = || anyhow!("blobs: bad value '{value}' for {key}");
        match key.trim() {
            "n" => n = Some(value.parse::<usize>().map_err(|_| bad())?),
            "d" => d = Some(value.parse::<usize>().map_err(|_| bad())?),
            "c" => c = Some(value.parse::<usize>().map_err(|_| bad())?),
            "spread" => spread = value.parse().map_err(|_| bad())?,
            "seed" => seed = value.parse().map_err(|_| bad())?,
            other => bail!("blobs: unknown parameter '{other}'"),
        }
    }
    let need = |v: Option<usize>, k: &str| v.ok_or_else(|| anyhow!("blobs: missing {k}="));
    Ok(synth_blobs(need(n, "n")?, need(d, "d")?, need(c, "c")?, spread, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args() -> TrainArgs {
        TrainArgs { data: Some("blobs:n=10,d=2,c=2".into()), ..Default::default() }
    }

    #[test]
    fn period_parsing() {
        assert_eq!(parse_period("auto").unwrap(), None);
        assert_eq!(parse_period("4").unwrap(), Some(4));
        assert!(parse_period("0").is_err());
        assert!(parse_period("x").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = std::env::temp_dir().join(format!("kslv-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.toml");
        std::fs::write(&path, "centers = 7\nbandwidth = 3.0\n[train]\nbatch_size = 5\nepochs = 2\n").unwrap();
        let a = TrainArgs { config: Some(path.clone()), epochs: Some(9), ..args() };
        let r = a.resolve().unwrap();
        assert_eq!((r.centers, r.train.batch_size, r.train.epochs), (Some(7), 5, 9));
        assert_eq!(r.spec.bandwidth(), 3.0);
        std::fs::write(&path, "nonsense = 1\n").unwrap();
        assert!(a.resolve().is_err());
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn projection_flags() {
        let a = TrainArgs { proj: Some("exact".into()), period: Some("1".into()), ..args() };
        let r = a.resolve().unwrap();
        assert_eq!(r.train.period, Some(1));
        assert!(matches!(r.train.projection, ProjectionMode::Exact { jitter: None }));
        let a = TrainArgs { ep2_epochs: Some(3), ..args() };
        match a.resolve().unwrap().train.projection {
            ProjectionMode::Inexact(ep2) => assert_eq!(ep2.epochs, 3),
            other => panic!("{other:?}"),
        }
        assert!(TrainArgs { proj: Some("fuzzy".into()), ..args() }.resolve().is_err());
        assert!(TrainArgs { merge: Some("scaled_listing".into()), ..args() }.resolve().is_ok());
    }

    #[test]
    fn blob_spec() {
        let d = blobs("n=30,d=4,c=3,spread=0.2,seed=5").unwrap();
        assert_eq!((d.len(), d.dim(), d.targets.outputs()), (30, 4, 3));
        assert!(blobs("n=30,d=4").is_err());
        assert!(blobs("n=30,d=4,c=3,k=1").is_err());
    }
}
