//! Datasets: file loading, scaling, splitting, minibatching and synthetic
//! generation with a known intrinsic dimensionality.
//!
//! # `flat_f32` container
//!
//! ```text
//! offset  size  field
//! 0       4     magic b"ARDM"
//! 4       4     version, u32 LE (1 = f32 payload, 2 = f64 payload)
//! 8       4     rows N, u32 LE
//! 12      4     cols D, u32 LE
//! 16      …     N·D little-endian floats, row-major
//! ```
//!
//! Datasets use version 1. Checkpoint parameter blobs use version 2 so that a
//! resumed run continues from bitwise-identical parameters.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ArdError, Result};
use crate::numerics::{Matrix, RngStream};

pub const MAGIC: &[u8; 4] = b"ARDM";
pub const HEADER_LEN: usize = 16;
pub const VERSION_F32: u32 = 1;
pub const VERSION_F64: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Csv,
    FlatF32,
}

impl DataFormat {
    /// Guesses from the extension: `.csv` is CSV, anything else `flat_f32`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::FlatF32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub name: String,
    /// `(min, max)` over all entries.
    pub pixel_range: (f64, f64),
    pub ground_truth_latent_dim: Option<usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Matrix) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(ArdError::Precondition(format!(
                "dataset needs at least one row and column, got {:?}",
                x.shape()
            )));
        }
        x.validate_finite("dataset")?;
        let pixel_range = value_range(x.as_slice());
        Ok(Self {
            x,
            name: name.into(),
            pixel_range,
            ground_truth_latent_dim: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    fn subset(&self, rows: &[usize], suffix: &str) -> Result<Dataset> {
        let mut d = Dataset::new(format!("{}{suffix}", self.name), self.x.select_rows(rows))?;
        d.ground_truth_latent_dim = self.ground_truth_latent_dim;
        Ok(d)
    }
}

fn value_range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn format_err(path: &Path, location: String, message: impl Into<String>) -> ArdError {
    ArdError::Format {
        path: path.to_path_buf(),
        location,
        message: message.into(),
    }
}

pub fn load_matrix_file(path: &Path, format: DataFormat) -> Result<Dataset> {
    let x = match format {
        DataFormat::Csv => read_csv_matrix(path)?,
        DataFormat::FlatF32 => {
            let (version, x) = read_container(path)?;
            if version != VERSION_F32 {
                return Err(ArdError::Version {
                    found: version,
                    expected: VERSION_F32,
                });
            }
            x
        }
    };
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("data")
        .to_string();
    Dataset::new(name, x).map_err(|e| match e {
        ArdError::NonFinite { index, .. } => format_err(path, format!("value {index}"), "non-finite value"),
        other => other,
    })
}

fn read_csv_matrix(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| ArdError::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|field| field.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| format_err(path, format!("line {}", line_no + 1), e.to_string()))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(format_err(
                    path,
                    format!("line {}", line_no + 1),
                    format!("expected {} fields, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

/// Reads any `ARDM` container, returning its version and payload.
pub fn read_container(path: &Path) -> Result<(u32, Matrix)> {
    let bytes = fs::read(path).map_err(|e| ArdError::io(path, e))?;
    decode_container(path, &bytes)
}

pub fn decode_container(path: &Path, bytes: &[u8]) -> Result<(u32, Matrix)> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            path,
            format!("byte {}", bytes.len()),
            "truncated header (need 16 bytes)",
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(path, "byte 0".into(), "bad magic, expected ARDM"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let width = match version {
        VERSION_F32 => 4,
        VERSION_F64 => 8,
        _ => {
            return Err(ArdError::Version {
                found: version,
                expected: VERSION_F32,
            })
        }
    };
    let expected = HEADER_LEN + rows * cols * width;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("byte {}", bytes.len().min(expected)),
            format!("payload length mismatch: header says {rows}x{cols}, file has {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    let data: Vec<f64> = if width == 4 {
        payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect()
    } else {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    Ok((version, Matrix::new(rows, cols, data)?))
}

pub fn encode_container(x: &Matrix, version: u32) -> Result<Vec<u8>> {
    let rows = u32::try_from(x.rows()).map_err(|_| ArdError::Precondition("too many rows for container".into()))?;
    let cols = u32::try_from(x.cols()).map_err(|_| ArdError::Precondition("too many columns for container".into()))?;
    let width = if version == VERSION_F64 { 8 } else { 4 };
    let mut out = Vec::with_capacity(HEADER_LEN + x.as_slice().len() * width);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    match version {
        VERSION_F32 => x.as_slice().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        VERSION_F64 => x.as_slice().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        other => {
            return Err(ArdError::Version {
                found: other,
                expected: VERSION_F32,
            })
        }
    }
    Ok(out)
}

pub fn write_container(path: &Path, x: &Matrix, version: u32) -> Result<()> {
    let bytes = encode_container(x, version)?;
    fs::write(path, bytes).map_err(|e| ArdError::io(path, e))
}

pub fn write_flat_f32(path: &Path, x: &Matrix) -> Result<()> {
    write_container(path, x, VERSION_F32)
}

pub fn write_csv(path: &Path, x: &Matrix) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| ArdError::io(path, e))?;
    for row in x.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", line.join(",")).map_err(|e| ArdError::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

/// Shuffles rows under `spec.seed`, takes the first `train_count` as the
/// training set and the next `test_count` as the test set. Leftover rows are
/// dropped. The test set is `None` when `test_count == 0`.
pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Option<Dataset>)> {
    if spec.train_count == 0 {
        return Err(ArdError::Precondition("training split must be non-empty".into()));
    }
    if spec.train_count + spec.test_count > d.len() {
        return Err(ArdError::Precondition(format!(
            "split {} + {} exceeds dataset size {}",
            spec.train_count,
            spec.test_count,
            d.len()
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    RngStream::new(spec.seed).split("split").shuffle(&mut order);
    let train = d.subset(&order[..spec.train_count], "-train")?;
    let test = if spec.test_count > 0 {
        Some(d.subset(&order[spec.train_count..spec.train_count + spec.test_count], "-test")?)
    } else {
        None
    };
    Ok((train, test))
}

/// Kind of affine preprocessing applied before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    None,
    /// Global `(v − min) / (max − min)` into `[0, 1]`.
    UnitRange,
    /// Per-column `(v − mean) / std`.
    Standardize,
}

/// A fitted, invertible per-column affine map `v ↦ (v − offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub kind: Scaling,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Transform {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: Scaling::None,
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit(x: &Matrix, kind: Scaling) -> Self {
        let dim = x.cols();
        match kind {
            Scaling::None => Self::identity(dim),
            Scaling::UnitRange => {
                let (lo, hi) = value_range(x.as_slice());
                let span = if hi > lo { hi - lo } else { 1.0 };
                Self {
                    kind,
                    offset: vec![lo; dim],
                    scale: vec![span; dim],
                }
            }
            Scaling::Standardize => {
                let n = x.rows() as f64;
                let mut mean = vec![0.0; dim];
                for row in x.row_iter() {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v / n;
                    }
                }
                let mut var = vec![0.0; dim];
                for row in x.row_iter() {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m) / n;
                    }
                }
                let scale = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
                Self {
                    kind,
                    offset: mean,
                    scale,
                }
            }
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        self.map(x, |v, o, s| (v - o) / s)
    }

    pub fn invert(&self, x: &Matrix) -> Result<Matrix> {
        self.map(x, |v, o, s| v * s + o)
    }

    fn map(&self, x: &Matrix, f: impl Fn(f64, f64, f64) -> f64) -> Result<Matrix> {
        if x.cols() != self.offset.len() {
            return Err(ArdError::Dimension {
                context: "transform width",
                expected: self.offset.len(),
                found: x.cols(),
            });
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, o), s) in out.row_mut(r).iter_mut().zip(&self.offset).zip(&self.scale) {
                *v = f(*v, *o, *s);
            }
        }
        Ok(out)
    }

    pub fn apply_dataset(&self, d: &Dataset) -> Result<Dataset> {
        let mut out = Dataset::new(d.name.clone(), self.apply(&d.x)?)?;
        out.ground_truth_latent_dim = d.ground_truth_latent_dim;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Linear,
    TanhMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub true_dim: usize,
    pub ambient_dim: usize,
    pub n: usize,
    pub noise_std: f64,
    pub nonlinearity: Nonlinearity,
}

/// Orthonormal columns via Gram-Schmidt on Gaussian draws, `rows × cols`, `cols ≤ rows`.
fn random_orthonormal(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = vec![0.0; rows];
        rng.fill_std_normal(&mut v);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut m = Matrix::zeros(rows, cols);
    for (c, b) in basis.iter().enumerate() {
        for (r, v) in b.iter().enumerate() {
            m.set(r, c, *v);
        }
    }
    m
}

/// Draws `s ~ N(0, I_k)` and maps it to `D` dimensions. `Linear` uses an
/// orthonormal `k → D` map; `TanhMlp` first passes `s` through a fixed random
/// `tanh` layer of width `min(2k, D)` and then an orthonormal map to `D`.
/// Isotropic Gaussian noise is added last.
pub fn synth_generate(spec: &SynthSpec, rng: &mut RngStream) -> Result<Dataset> {
    let SynthSpec {
        true_dim: k,
        ambient_dim: dim,
        n,
        noise_std,
        nonlinearity,
    } = *spec;
    if k == 0 || k > dim {
        return Err(ArdError::Precondition(format!("need 1 <= k <= D, got k={k}, D={dim}")));
    }
    if n == 0 {
        return Err(ArdError::Precondition("synthetic dataset needs n >= 1".into()));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(ArdError::Precondition(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let mut map_rng = rng.split("synth-map");
    let mut sample_rng = rng.split("synth-samples");

    let mut s = Matrix::zeros(n, k);
    sample_rng.fill_std_normal(s.as_mut_slice());

    let features = match nonlinearity {
        Nonlinearity::Linear => s,
        Nonlinearity::TanhMlp => {
            let width = (2 * k).min(dim);
            let mut w = Matrix::zeros(width, k);
            map_rng.fill_std_normal(w.as_mut_slice());
            let w = w.map(|v| v * 1.5 / (k as f64).sqrt());
            let mut bias = vec![0.0; width];
            map_rng.fill_std_normal(&mut bias);
            let mut h = s.matmul_nt(&w)?;
            for r in 0..n {
                for (v, b) in h.row_mut(r).iter_mut().zip(&bias) {
                    *v = (*v + 0.5 * b).tanh();
                }
            }
            h
        }
    };
    let q = random_orthonormal(dim, features.cols(), &mut map_rng);
    let mut x = features.matmul_nt(&q)?;
    if noise_std > 0.0 {
        for v in x.as_mut_slice() {
            *v += noise_std * sample_rng.std_normal();
        }
    }
    let mut d = Dataset::new(format!("synth_k{k}_d{dim}"), x)?;
    d.ground_truth_latent_dim = Some(k);
    Ok(d)
}

/// Serializable position of a [`MinibatchStream`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinibatchState {
    pub order: Vec<usize>,
    pub cursor: usize,
    pub epoch: u64,
}

/// Endless stream of minibatches. Each epoch is a fresh shuffle and ends with a
/// short batch when the batch size does not divide the dataset.
#[derive(Debug, Clone)]
pub struct MinibatchStream {
    batch_size: usize,
    rng: RngStream,
    state: MinibatchState,
    rows: usize,
}

impl MinibatchStream {
    pub fn new(rows: usize, batch_size: usize, rng: RngStream) -> Result<Self> {
        if batch_size == 0 {
            return Err(ArdError::Precondition("batch size must be >= 1".into()));
        }
        Ok(Self {
            batch_size,
            rng,
            state: MinibatchState {
                order: Vec::new(),
                cursor: 0,
                epoch: 0,
            },
            rows,
        })
    }

    pub fn restore(rows: usize, batch_size: usize, rng: RngStream, state: MinibatchState) -> Result<Self> {
        let mut s = Self::new(rows, batch_size, rng)?;
        if !state.order.is_empty() && state.order.len() != rows {
            return Err(ArdError::Dimension {
                context: "minibatch order length",
                expected: rows,
                found: state.order.len(),
            });
        }
        s.state = state;
        Ok(s)
    }

    pub fn state(&self) -> &MinibatchState {
        &self.state
    }

    pub fn rng(&self) -> &RngStream {
        &self.rng
    }

    /// Completed-or-current epoch count (1 during the first sweep).
    pub fn epoch(&self) -> u64 {
        self.state.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.rows.div_ceil(self.batch_size)
    }

    /// Row indices of the next minibatch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.state.cursor >= self.state.order.len() {
            self.state.order = (0..self.rows).collect();
            self.rng.shuffle(&mut self.state.order);
            self.state.cursor = 0;
            self.state.epoch += 1;
        }
        let end = (self.state.cursor + self.batch_size).min(self.rows);
        let idx = self.state.order[self.state.cursor..end].to_vec();
        self.state.cursor = end;
        idx
    }
}

/// Convenience iterator over minibatch matrices of a dataset.
pub fn minibatches<'a>(d: &'a Dataset, batch_size: usize, rng: RngStream) -> Result<impl Iterator<Item = Matrix> + 'a> {
    let mut stream = MinibatchStream::new(d.len(), batch_size, rng)?;
    Ok(std::iter::from_fn(move || Some(d.x.select_rows(&stream.next_indices()))))
}
