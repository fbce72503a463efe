//! In-memory datasets: MNIST IDX image files and synthetic Gaussian blobs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::rng::{self, Stream};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("IDX parse error at byte offset {offset}: {message}")]
    Idx { offset: usize, message: String },
    #[error("dataset must contain at least one sample of positive dimension")]
    Empty,
    #[error("sample value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Full,
    Train,
    Test,
}

/// `N × D` samples in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<f64>,
    n: usize,
    dim: usize,
    split: Split,
    source: String,
}

impl Dataset {
    pub fn new(samples: Vec<f64>, dim: usize, split: Split, source: impl Into<String>) -> Result<Self> {
        if dim == 0 || samples.is_empty() {
            return Err(DataError::Empty);
        }
        if samples.len() % dim != 0 {
            return Err(DataError::Invalid(format!(
                "{} values do not divide into rows of {dim}",
                samples.len()
            )));
        }
        if let Some((index, &value)) = samples.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::OutOfRange { index, value });
        }
        Ok(Self {
            n: samples.len() / dim,
            samples,
            dim,
            split,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `start..end` as a `[end - start, D]` tensor.
    pub fn batch_range(&self, start: usize, end: usize) -> Tensor {
        Tensor::matrix(end - start, self.dim, self.samples[start * self.dim..end * self.dim].to_vec())
            .expect("row slice matches shape")
    }

    /// The given rows, in order, as a `[indices.len(), D]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor::matrix(indices.len(), self.dim, data).expect("rows match shape")
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        Self::new(self.batch(indices).into_data(), self.dim, split, self.source.clone())
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.n).max(1);
        Self {
            samples: self.samples[..n * self.dim].to_vec(),
            n,
            dim: self.dim,
            split: self.split,
            source: self.source.clone(),
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Per-dimension mean over all samples.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for row in self.samples.chunks_exact(self.dim) {
            m.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        m.iter_mut().for_each(|a| *a /= self.n as f64);
        m
    }
}

fn idx_err(offset: usize, message: impl Into<String>) -> DataError {
    DataError::Idx {
        offset,
        message: message.into(),
    }
}

/// Parses an IDX image file (`0x00000803`, big-endian count/rows/cols,
/// then unsigned bytes). Pixels are scaled by 1/255. `limit` keeps only the
/// first images, but the whole file is still validated.
pub fn parse_idx_images(bytes: &[u8], limit: Option<usize>, source: &str) -> Result<Dataset> {
    if bytes.len() < IDX_HEADER_LEN {
        return Err(idx_err(
            bytes.len(),
            format!("header needs {IDX_HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    let word = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let magic = word(0);
    if magic != IDX_IMAGE_MAGIC {
        return Err(idx_err(
            0,
            format!("magic 0x{magic:08x} is not the IDX image magic 0x{IDX_IMAGE_MAGIC:08x}"),
        ));
    }
    let (count, rows, cols) = (word(4) as usize, word(8) as usize, word(12) as usize);
    for (name, value, offset) in [("image count", count, 4), ("rows", rows, 8), ("cols", cols, 12)] {
        if value == 0 {
            return Err(idx_err(offset, format!("{name} is zero")));
        }
    }
    let dim = rows * cols;
    let expected = count
        .checked_mul(dim)
        .and_then(|p| p.checked_add(IDX_HEADER_LEN))
        .ok_or_else(|| idx_err(4, "declared size overflows"))?;
    if bytes.len() < expected {
        return Err(idx_err(
            bytes.len(),
            format!("payload truncated: header declares {count}x{rows}x{cols}, needing {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(idx_err(
            expected,
            format!("{} trailing bytes after the declared payload", bytes.len() - expected),
        ));
    }
    let keep = limit.map_or(count, |l| l.min(count));
    let samples = bytes[IDX_HEADER_LEN..IDX_HEADER_LEN + keep * dim]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Dataset::new(samples, dim, Split::Full, source)
}

pub fn load_idx(path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_idx_images(&bytes, limit, &path.display().to_string())
}

pub const DEFAULT_BLOB_SPREAD: f64 = 0.05;

/// `n` samples from `k_modes` isotropic Gaussians (std [`DEFAULT_BLOB_SPREAD`])
/// whose means are uniform in `(0.2, 0.8)^d`; values clipped to `[0, 1]`.
pub fn synthetic_blobs(n: usize, d: usize, k_modes: usize, seed: u64) -> Result<Dataset> {
    synthetic_blobs_with_spread(n, d, k_modes, DEFAULT_BLOB_SPREAD, seed)
}

pub fn synthetic_blobs_with_spread(n: usize, d: usize, k_modes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    blobs_and_means(n, d, k_modes, spread, seed).map(|(data, _)| data)
}

/// As [`synthetic_blobs_with_spread`], also returning the `k_modes` means.
pub fn blobs_and_means(n: usize, d: usize, k_modes: usize, spread: f64, seed: u64) -> Result<(Dataset, Vec<Vec<f64>>)> {
    if n == 0 || d == 0 || k_modes == 0 {
        return Err(DataError::Invalid("n, d and k_modes must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let means: Vec<f64> = (0..k_modes * d).map(|_| rng.random_range(0.2..0.8)).collect();
    let mut samples = Vec::with_capacity(n * d);
    for _ in 0..n {
        let mode = rng.random_range(0..k_modes);
        let noise = rng::standard_normal(&mut rng, d);
        let centre = &means[mode * d..(mode + 1) * d];
        samples.extend(centre.iter().zip(noise).map(|(m, e)| (m + spread * e).clamp(0.0, 1.0)));
    }
    let data = Dataset::new(samples, d, Split::Full, format!("blobs(n={n},d={d},k={k_modes},seed={seed})"))?;
    Ok((data, means.chunks(d).map(<[f64]>::to_vec).collect()))
}

/// Random disjoint train/test partition; the test part gets
/// `round(n · test_fraction)` samples (at least one, leaving at least one).
pub fn split_and_shuffle(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Invalid(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    if data.len() < 2 {
        return Err(DataError::Invalid("need at least two samples to split".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Split));
    let n_test = ((data.len() as f64 * test_fraction).round() as usize).clamp(1, data.len() - 1);
    let (test, train) = order.split_at(n_test);
    Ok((data.subset(train, Split::Train)?, data.subset(test, Split::Test)?))
}
