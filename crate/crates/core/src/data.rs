//! Datasets: CSV and binary loaders, one-hot targets, synthetic blobs and metrics.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::model::{classify, ByteReader};
use crate::real::{Precision, Real};

/// Magic bytes opening a binary dataset.
pub const DATA_MAGIC: &[u8; 4] = b"KSLV";
pub const DATA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class ids in `[0, classes)`.
    Classes { labels: Vec<usize>, classes: usize },
    /// Real-valued targets, one column per output.
    Real(DMatrix<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Real(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn outputs(&self) -> usize {
        match self {
            Targets::Classes { classes, .. } => *classes,
            Targets::Real(m) => m.ncols(),
        }
    }

    /// Regression matrix: one-hot rows for classes, the values otherwise.
    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            Targets::Classes { labels, classes } => {
                encode_targets(labels, *classes).expect("labels validated at construction")
            }
            Targets::Real(m) => m.clone(),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Real(_) => None,
        }
    }

    fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, classes } => {
                Targets::Classes { labels: rows.iter().map(|&i| labels[i]).collect(), classes: *classes }
            }
            Targets::Real(m) => Targets::Real(crate::kernel::select_rows(m, rows)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub targets: Targets,
    pub name: String,
    pub provenance: String,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, targets: Targets, name: impl Into<String>, provenance: impl Into<String>) -> Result<Self> {
        if x.nrows() == 0 {
            return input("dataset is empty");
        }
        if x.nrows() != targets.len() {
            return input(format!("{} feature rows but {} targets", x.nrows(), targets.len()));
        }
        if let Some(i) = x.row_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return input(format!("non-finite feature in row {i}"));
        }
        match &targets {
            Targets::Classes { labels, classes } => {
                if let Some(bad) = labels.iter().find(|&&l| l >= *classes) {
                    return input(format!("class id {bad} out of range for {classes} classes"));
                }
            }
            Targets::Real(m) => {
                if m.iter().any(|v| !v.is_finite()) {
                    return input("non-finite target value");
                }
            }
        }
        Ok(Self { x, targets, name: name.into(), provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: crate::kernel::select_rows(&self.x, rows),
            targets: self.targets.select(rows),
            name: self.name.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Deterministic split into `(train, holdout)` with `round(n * fraction)` holdout rows.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return input(format!("holdout fraction must be in [0, 1), got {fraction}"));
        }
        let n = self.len();
        let held = ((n as f64) * fraction).round() as usize;
        if held == 0 || held >= n {
            return input(format!("holdout of {held} rows out of {n} leaves an empty side"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perm = rand::seq::index::sample(&mut rng, n, n).into_vec();
        Ok((self.select(&perm[held..]), self.select(&perm[..held])))
    }
}

/// One-hot rows for class ids in `[0, classes)`.
pub fn encode_targets(labels: &[usize], classes: usize) -> Result<DMatrix<f64>> {
    if classes == 0 {
        return input("need at least one class");
    }
    let mut out = DMatrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return input(format!("class id {l} at row {i} out of range for {classes} classes"));
        }
        out[(i, l)] = 1.0;
    }
    Ok(out)
}

/// How the label column of a CSV file is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelKind {
    /// Class ids when every label is a non-negative integer, real targets otherwise.
    #[default]
    Auto,
    Class,
    Real,
}

/// Reads a CSV file whose column `label_column` holds the label and every
/// other column a feature.
pub fn load_csv(path: &Path, has_header: bool, label_column: usize) -> Result<Dataset> {
    load_csv_with(path, has_header, label_column, LabelKind::Auto)
}

pub fn load_csv_with(path: &Path, has_header: bool, label_column: usize, kind: LabelKind) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return input(format!("{}: line {line} has {} fields, expected {w}", path.display(), record.len()));
            }
            _ => {}
        }
        if label_column >= record.len() {
            return input(format!("{}: label column {label_column} missing on line {line}", path.display()));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| crate::Error::Input(format!("{}: line {line}: cannot parse '{field}'", path.display())))?;
            if !v.is_finite() {
                return input(format!("{}: line {line}: non-finite value '{field}'", path.display()));
            }
            if j == label_column {
                raw_labels.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let n = raw_labels.len();
    if n == 0 {
        return input(format!("{}: no data rows", path.display()));
    }
    let d = features.len() / n;
    let x = DMatrix::from_row_slice(n, d, &features);
    let integral = raw_labels.iter().all(|v| *v >= 0.0 && v.fract() == 0.0 && *v < u32::MAX as f64);
    let targets = match kind {
        LabelKind::Class | LabelKind::Auto if integral => {
            let labels: Vec<usize> = raw_labels.iter().map(|v| *v as usize).collect();
            let classes = labels.iter().max().map_or(1, |m| m + 1);
            Targets::Classes { labels, classes }
        }
        LabelKind::Class => return input(format!("{}: labels are not non-negative integers", path.display())),
        _ => Targets::Real(DMatrix::from_column_slice(n, 1, &raw_labels)),
    };
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(x, targets, name, format!("csv:{}", path.display()))
}

fn csv_error(e: csv::Error) -> crate::Error {
    let line = e.position().map(|p| format!(" at line {}", p.line())).unwrap_or_default();
    crate::Error::Input(format!("csv{line}: {e}"))
}

/// Writes features followed by a single label column. Real targets must have one column.
pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let d = data.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_error)?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.x.row(i).iter().map(|v| v.to_string()).collect();
        row.push(match &data.targets {
            Targets::Classes { labels, .. } => labels[i].to_string(),
            Targets::Real(m) if m.ncols() == 1 => m[(i, 0)].to_string(),
            Targets::Real(_) => return input("CSV output supports a single target column"),
        });
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Binary container: magic, version, `n`, `d`, `c`, precision tag, then
/// row-major features and row-major `n x c` targets, all little-endian.
/// Class labels are stored one-hot.
pub fn save_binary(data: &Dataset, path: &Path, precision: Precision) -> Result<()> {
    fs::write(path, to_binary(data, precision))?;
    Ok(())
}

pub fn to_binary(data: &Dataset, precision: Precision) -> Vec<u8> {
    let targets = data.targets.matrix();
    let (n, d, c) = (data.len(), data.dim(), targets.ncols());
    let mut out = Vec::with_capacity(33 + (n * d + n * c) * precision.byte_width());
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    for v in [n, d, c] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.push(precision.tag());
    for m in [&data.x, &targets] {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                match precision {
                    Precision::F32 => (m[(i, j)] as f32).write_le(&mut out),
                    Precision::F64 => m[(i, j)].write_le(&mut out),
                }
            }
        }
    }
    out
}

pub fn load_binary(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mut data = from_binary(&bytes)?;
    data.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    data.provenance = format!("binary:{}", path.display());
    Ok(data)
}

pub fn from_binary(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4)? != DATA_MAGIC {
        return input("dataset file: bad magic");
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != DATA_VERSION {
        return input(format!("dataset file: unsupported version {version}"));
    }
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let c = r.u64()? as usize;
    let precision = Precision::from_tag(r.u8()?).ok_or_else(|| crate::Error::Input("dataset file: bad precision tag".into()))?;
    if n == 0 {
        return input("dataset file: dataset is empty");
    }
    let width = precision.byte_width();
    let expected = n
        .checked_mul(d + c)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| crate::Error::Input("dataset file: dimensions overflow".into()))?;
    if bytes.len() - r.pos != expected {
        return input(format!(
            "dataset file: payload is {} bytes, header implies {expected} (truncated or corrupt)",
            bytes.len() - r.pos
        ));
    }
    let mut read = |rows: usize, cols: usize| -> Result<DMatrix<f64>> {
        let mut v = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let chunk = r.take(width)?;
            v.push(match precision {
                Precision::F32 => f32::read_le(chunk) as f64,
                Precision::F64 => f64::read_le(chunk),
            });
        }
        Ok(DMatrix::from_row_slice(rows, cols, &v))
    };
    let x = read(n, d)?;
    let t = read(n, c)?;
    let one_hot = c >= 2
        && t.row_iter().all(|row| row.iter().filter(|v| **v == 1.0).count() == 1 && row.iter().all(|v| *v == 0.0 || *v == 1.0));
    let targets = if one_hot {
        let labels = t.row_iter().map(|row| row.iter().position(|v| *v == 1.0).unwrap()).collect();
        Targets::Classes { labels, classes: c }
    } else {
        Targets::Real(t)
    };
    Dataset::new(x, targets, "", "binary")
}

/// `c` Gaussian blobs around the unit simplex vertices `e_0 .. e_{c-1}`
/// (fixed pseudo-random unit directions when `c > d`), with per-coordinate
/// standard deviation `spread`. Labels cycle through the classes.
pub fn synth_blobs(n: usize, d: usize, c: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 || c == 0 {
        return input("synth_blobs needs positive n, d and c");
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return input(format!("spread must be finite and >= 0, got {spread}"));
    }
    let means = class_means(d, c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let x = DMatrix::from_fn(n, d, |_, _| 0.0);
    let mut x = x;
    for i in 0..n {
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            x[(i, j)] = means[(labels[i], j)] + spread * noise;
        }
    }
    Dataset::new(
        x,
        Targets::Classes { labels, classes: c },
        format!("blobs-n{n}-d{d}-c{c}"),
        format!("synth_blobs(n={n}, d={d}, c={c}, spread={spread}, seed={seed})"),
    )
}

/// Class means used by [`synth_blobs`], one row per class.
pub fn class_means(d: usize, c: usize) -> DMatrix<f64> {
    if c <= d {
        return DMatrix::from_fn(c, d, |k, j| if k == j { 1.0 } else { 0.0 });
    }
    // Fixed stream, independent of the data seed.
    let mut rng = ChaCha8Rng::seed_from_u64(0xB10B5);
    let mut means = DMatrix::from_fn(c, d, |_, _| StandardNormal.sample(&mut rng));
    for mut row in means.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    means
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean over all `n * c` entries of the squared error.
    pub mse: f64,
    /// Argmax accuracy; `None` for single-output regression.
    pub accuracy: Option<f64>,
}

pub fn metrics<T: Real>(pred: &DMatrix<T>, targets: &Targets) -> Result<Metrics> {
    let truth = targets.matrix();
    if pred.shape() != truth.shape() {
        return input(format!("prediction shape {:?} does not match targets {:?}", pred.shape(), truth.shape()));
    }
    let n = truth.len().max(1) as f64;
    let mse = pred.iter().zip(truth.iter()).map(|(a, b)| (a.as_f64() - b).powi(2)).sum::<f64>() / n;
    let accuracy = match targets {
        Targets::Classes { labels, classes } if *classes >= 2 => {
            let predicted = classify(pred)?;
            let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
            Some(hits as f64 / labels.len().max(1) as f64)
        }
        _ => None,
    };
    Ok(Metrics { mse, accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn csv_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "a.csv", "f1,f2,label\n0.5,1.0,0\n1.5,2.0,1\n-1,3,1\n");
        let data = load_csv(&path, true, 2).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.dim(), 2);
        assert_eq!(data.targets.labels().unwrap(), &[0, 1, 1]);
        assert_eq!(data.x[(2, 0)], -1.0);
    }

    #[test]
    fn csv_rejects_nan_and_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let nan = write(&dir, "nan.csv", "a,b,label\n1,2,0\n3,NaN,1\n");
        let err = load_csv(&nan, true, 2).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let ragged = write(&dir, "ragged.csv", "1,2,0\n3,1\n");
        let err = load_csv(&ragged, false, 2).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let junk = write(&dir, "junk.csv", "1,x,0\n");
        assert!(load_csv(&junk, false, 2).is_err());
        let empty = write(&dir, "empty.csv", "a,b\n");
        assert!(load_csv(&empty, true, 1).is_err());
    }

    #[test]
    fn csv_real_targets() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "r.csv", "0.25,1\n0.5,2\n");
        let data = load_csv(&path, false, 0).unwrap();
        assert_eq!(data.targets, Targets::Real(DMatrix::from_column_slice(2, 1, &[0.25, 0.5])));
        assert_eq!(data.x, DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
    }

    #[test]
    fn encode_examples() {
        let m = encode_targets(&[2], 4).unwrap();
        assert_eq!(m.row(0).iter().cloned().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(encode_targets(&[4], 4).is_err());
        let labels: Vec<usize> = (0..50).map(|i| (i * 7) % 5).collect();
        let m = encode_targets(&labels, 5).unwrap();
        assert!(m.row_iter().all(|r| r.sum() == 1.0));
        let real = Targets::Real(DMatrix::from_column_slice(2, 1, &[0.3, -2.0]));
        assert_eq!(real.matrix(), DMatrix::from_column_slice(2, 1, &[0.3, -2.0]));
    }

    #[test]
    fn binary_errors() {
        let data = synth_blobs(10, 3, 2, 0.1, 1).unwrap();
        let bytes = to_binary(&data, Precision::F64);
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(from_binary(&bad).is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(from_binary(&bad_version).unwrap_err().to_string().contains("version"));
        assert!(from_binary(&bytes[..bytes.len() - 1]).is_err());
        let mut empty = bytes[..33].to_vec();
        empty[8..16].copy_from_slice(&0u64.to_le_bytes());
        assert!(from_binary(&empty).unwrap_err().to_string().contains("empty"));
    }

    #[test]
    fn binary_roundtrip_f64_and_f32() {
        let data = synth_blobs(20, 4, 3, 0.5, 2).unwrap();
        let back = from_binary(&to_binary(&data, Precision::F64)).unwrap();
        assert_eq!(back.x, data.x);
        assert_eq!(back.targets, data.targets);
        let back32 = from_binary(&to_binary(&data, Precision::F32)).unwrap();
        assert!((back32.x - &data.x).amax() < 1e-6);
    }

    #[test]
    fn blobs_are_seeded() {
        let a = synth_blobs(40, 3, 4, 0.3, 11).unwrap();
        let b = synth_blobs(40, 3, 4, 0.3, 11).unwrap();
        let c = synth_blobs(40, 3, 4, 0.3, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.x, c.x);
        assert_eq!(class_means(3, 4).nrows(), 4);
    }

    #[test]
    fn zero_spread_nearest_mean_is_perfect() {
        for &(d, c) in &[(5usize, 3usize), (2, 6)] {
            let data = synth_blobs(60, d, c, 0.0, 3).unwrap();
            let means = class_means(d, c);
            let labels = data.targets.labels().unwrap();
            for i in 0..data.len() {
                let best = (0..c)
                    .min_by(|&a, &b| {
                        let da = (data.x.row(i) - means.row(a)).norm();
                        let db = (data.x.row(i) - means.row(b)).norm();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                assert_eq!(best, labels[i]);
            }
        }
    }

    #[test]
    fn metrics_examples() {
        let targets = Targets::Classes { labels: vec![0, 1, 1, 0], classes: 2 };
        let perfect = targets.matrix();
        let m = metrics(&perfect, &targets).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.accuracy, Some(1.0));
        let constant = DMatrix::from_element(4, 2, 0.5);
        assert_eq!(metrics(&constant, &targets).unwrap().accuracy, Some(0.5));
        assert!(metrics(&DMatrix::<f64>::zeros(3, 2), &targets).is_err());
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let data = synth_blobs(50, 2, 2, 0.1, 0).unwrap();
        let (tr, te) = data.split(0.2, 4).unwrap();
        assert_eq!(te.len(), 10);
        assert_eq!(tr.len(), 40);
        let (tr2, _) = data.split(0.2, 4).unwrap();
        assert_eq!(tr, tr2);
        assert!(data.split(1.0, 0).is_err());
    }
}
