//! General kernel models `f(x) = sum_j alpha_j k(x, z_j)` and the auxiliary
//! state that lives between projections.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{input, numeric, Error, Result};
use crate::kernel::{kernel_matrix, kernel_matrix_unchecked, KernelFamily, KernelSpec};
use crate::preconditioner::NystromPreconditioner;
use crate::real::{Precision, Real};

/// Magic bytes opening a serialized model.
pub const MODEL_MAGIC: &[u8; 16] = b"KSLV-MODEL-v0001";

#[derive(Debug, Clone, PartialEq)]
pub struct KernelModel<T: Real> {
    spec: KernelSpec,
    centers: DMatrix<T>,
    weights: DMatrix<T>,
}

impl<T: Real> KernelModel<T> {
    pub fn new(spec: KernelSpec, centers: DMatrix<T>, weights: DMatrix<T>) -> Result<Self> {
        if centers.nrows() == 0 || centers.ncols() == 0 {
            return input("kernel model needs at least one center of dimension >= 1");
        }
        if weights.nrows() != centers.nrows() {
            return input(format!(
                "kernel model has {} centers but {} weight rows",
                centers.nrows(),
                weights.nrows()
            ));
        }
        if weights.ncols() == 0 {
            return input("kernel model needs at least one output column");
        }
        Ok(Self { spec, centers, weights })
    }

    /// A model with all weights zero.
    pub fn zeros(spec: KernelSpec, centers: DMatrix<T>, outputs: usize) -> Result<Self> {
        let p = centers.nrows();
        Self::new(spec, centers, DMatrix::zeros(p, outputs))
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn centers(&self) -> &DMatrix<T> {
        &self.centers
    }

    pub fn weights(&self) -> &DMatrix<T> {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut DMatrix<T> {
        &mut self.weights
    }

    pub fn num_centers(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    /// `K(X, Z) alpha`.
    pub fn predict(&self, x: &DMatrix<T>) -> Result<DMatrix<T>> {
        Ok(kernel_matrix(&self.spec, x, &self.centers)? * &self.weights)
    }

    /// Serializes to the binary container at `path` and writes a JSON sidecar
    /// next to it (`<path>.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        let meta = ModelMeta::of(self);
        let json = serde_json::to_string_pretty(&meta).expect("model metadata serializes");
        fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (p, d, c) = (self.num_centers(), self.dim(), self.outputs());
        let mut out = Vec::with_capacity(16 + 2 + 8 * 4 + (p * d + p * c) * T::PRECISION.byte_width());
        out.extend_from_slice(MODEL_MAGIC);
        out.push(self.spec.family().tag());
        out.push(T::PRECISION.tag());
        out.extend_from_slice(&self.spec.bandwidth().to_le_bytes());
        for dim in [p, d, c] {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for m in [&self.centers, &self.weights] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    m[(i, j)].write_le(&mut out);
                }
            }
        }
        out
    }

    /// Parses a container. Values stored at the other precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(16)? != MODEL_MAGIC {
            return input("model file: bad magic header");
        }
        let family = KernelFamily::from_tag(r.u8()?).ok_or_else(|| Error::Input("model file: unknown kernel tag".into()))?;
        let precision =
            Precision::from_tag(r.u8()?).ok_or_else(|| Error::Input("model file: unknown precision tag".into()))?;
        let bandwidth = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let spec = KernelSpec::new(family, bandwidth)?;
        let p = r.u64()? as usize;
        let d = r.u64()? as usize;
        let c = r.u64()? as usize;
        let width = precision.byte_width();
        let expected = p
            .checked_mul(d)
            .and_then(|pd| p.checked_mul(c).map(|pc| pd + pc))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Input("model file: dimensions overflow".into()))?;
        if bytes.len() - r.pos != expected {
            return input(format!(
                "model file: payload is {} bytes, header implies {expected}",
                bytes.len() - r.pos
            ));
        }
        let mut read_matrix = |rows: usize, cols: usize| -> Result<DMatrix<T>> {
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let chunk = r.take(width)?;
                let v = match precision {
                    Precision::F32 => T::of_f64(f32::read_le(chunk) as f64),
                    Precision::F64 => T::of_f64(f64::read_le(chunk)),
                };
                if !v.is_finite() {
                    return numeric("model file: non-finite value");
                }
                values.push(v);
            }
            Ok(DMatrix::from_row_slice(rows, cols, &values))
        };
        let centers = read_matrix(p, d)?;
        let weights = read_matrix(p, c)?;
        Self::new(spec, centers, weights)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Human-readable description of a stored model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kernel: KernelSpec,
    pub precision: Precision,
    pub centers: usize,
    pub dim: usize,
    pub outputs: usize,
}

impl ModelMeta {
    pub fn of<T: Real>(model: &KernelModel<T>) -> Self {
        Self {
            kernel: *model.spec(),
            precision: T::PRECISION,
            centers: model.num_centers(),
            dim: model.dim(),
            outputs: model.outputs(),
        }
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

pub(crate) struct ByteReader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return input(format!("file truncated at byte {}", self.pos));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Mutable state between projections: temporary centers with their weights,
/// Nyström-track weights and the accumulated gradient at the centers.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryState<T: Real> {
    pub tmp_centers: Vec<DMatrix<T>>,
    pub tmp_weights: Vec<DMatrix<T>>,
    /// `s x c` weights on the Nyström subsample.
    pub nystrom_weights: DMatrix<T>,
    /// `p x c` accumulated gradient `h`.
    pub accumulated: DMatrix<T>,
    pub batches_seen: usize,
}

impl<T: Real> AuxiliaryState<T> {
    pub fn new(centers: usize, nystrom: usize, outputs: usize) -> Self {
        Self {
            tmp_centers: Vec::new(),
            tmp_weights: Vec::new(),
            nystrom_weights: DMatrix::zeros(nystrom, outputs),
            accumulated: DMatrix::zeros(centers, outputs),
            batches_seen: 0,
        }
    }

    pub fn reset(&mut self) {
        self.tmp_centers.clear();
        self.tmp_weights.clear();
        self.nystrom_weights.fill(T::zero());
        self.accumulated.fill(T::zero());
        self.batches_seen = 0;
    }

    /// True when the state holds nothing since the last projection.
    pub fn is_reset(&self) -> bool {
        self.tmp_centers.is_empty()
            && self.tmp_weights.is_empty()
            && self.batches_seen == 0
            && self.nystrom_weights.iter().all(|v| *v == T::zero())
            && self.accumulated.iter().all(|v| *v == T::zero())
    }

    /// Total number of temporary centers.
    pub fn tmp_len(&self) -> usize {
        self.tmp_centers.iter().map(DMatrix::nrows).sum()
    }
}

/// Evaluates the auxiliary model
/// `K(X, Z) alpha + K(X, Z_tmp) alpha_tmp + K(X, X_s) alpha_s`.
pub fn predict_auxiliary<T: Real>(
    model: &KernelModel<T>,
    state: &AuxiliaryState<T>,
    precond: &NystromPreconditioner<T>,
    x: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    if state.accumulated.nrows() != model.num_centers()
        || state.nystrom_weights.nrows() != precond.size()
        || state.nystrom_weights.ncols() != model.outputs()
        || state.tmp_centers.len() != state.tmp_weights.len()
    {
        return input("predict_auxiliary: state is inconsistent with the model or preconditioner");
    }
    let spec = model.spec();
    let mut out = model.predict(x)?;
    for (block, weights) in state.tmp_centers.iter().zip(&state.tmp_weights) {
        out += kernel_matrix(spec, x, block)? * weights;
    }
    out += kernel_matrix_unchecked(spec, x, precond.subsample()) * &state.nystrom_weights;
    Ok(out)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn classify<T: Real>(values: &DMatrix<T>) -> Result<Vec<usize>> {
    if values.ncols() < 2 {
        return input(format!("classify needs at least two columns, got {}", values.ncols()));
    }
    let mut labels = Vec::with_capacity(values.nrows());
    for (i, row) in values.row_iter().enumerate() {
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return numeric(format!("classify: non-finite value at row {i}, column {j}"));
            }
            if *v > row[best] {
                best = j;
            }
        }
        labels.push(best);
    }
    Ok(labels)
}
