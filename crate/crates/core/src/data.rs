//! Datasets: synthetic Gaussian blobs, label noise, CSV I/O, splits and batches.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{RngStream, Tensor};

const BLOB_STREAM_TAG: u64 = 0xb10b;
const NOISE_STREAM_TAG: u64 = 0x0153;
const SPLIT_STREAM_TAG: u64 = 0x5911;
const BATCH_STREAM_TAG: u64 = 0xba7c;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N × d]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if labels.is_empty() {
            return Err(invalid("dataset must hold at least one example"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        if !features.all_finite() {
            return Err(Error::NonFinite("features"));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Dataset::new(
            Tensor::matrix(indices.len(), d, data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Parameters of a synthetic Gaussian-blob problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Centers are uniform in `[-spread, spread]^d`.
    pub spread: f64,
    /// Isotropic standard deviation of each cluster.
    pub sigma: f64,
}

/// `classes` isotropic Gaussian clusters, `per_class` points each, class-major order.
pub fn gen_blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.per_class == 0 || spec.dim == 0 {
        return Err(invalid("blobs need >= 2 classes, >= 1 point per class and >= 1 dimension"));
    }
    if !(spec.spread > 0.0 && spec.sigma > 0.0) {
        return Err(invalid("blob spread and sigma must be positive"));
    }
    let mut centers_rng = RngStream::derive(seed, &[BLOB_STREAM_TAG, 0]);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| centers_rng.uniform_range(-spec.spread, spec.spread))
                .collect()
        })
        .collect();
    let mut rng = RngStream::derive(seed, &[BLOB_STREAM_TAG, 1]);
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            data.extend(center.iter().map(|&m| m + spec.sigma * rng.normal()));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::matrix(n, spec.dim, data)?, labels, spec.classes)
}

/// Independently replaces each label, with probability `rate`, by a uniformly
/// chosen different class.
pub fn inject_label_noise(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(invalid("label noise rate must lie in [0, 1]"));
    }
    let mut rng = RngStream::derive(seed, &[NOISE_STREAM_TAG]);
    let c = ds.classes;
    let labels = ds
        .labels
        .iter()
        .map(|&y| {
            if rng.bernoulli(rate) {
                let k = rng.below(c - 1);
                if k >= y {
                    k + 1
                } else {
                    k
                }
            } else {
                y
            }
        })
        .collect();
    Dataset::new(ds.features.clone(), labels, c)
}

/// Parses `f0,...,f{d-1},label` CSV text.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let d = cols.len().saturating_sub(1);
    let expected: Vec<String> = (0..d).map(|i| format!("f{i}")).chain(["label".to_string()]).collect();
    if d == 0 || cols != expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", expected.join(",")),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {} fields, found {}", d + 1, fields.len()),
            });
        }
        for f in &fields[..d] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad number {f:?}"),
            })?;
            data.push(v);
        }
        let y: usize = fields[d].parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("label {:?} is not a non-negative integer", fields[d]),
        })?;
        labels.push(y);
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new(Tensor::matrix(labels.len(), d, data)?, labels, classes)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_csv(&fs::read_to_string(path)?)
}

/// CSV text with shortest round-trip float formatting.
pub fn to_csv(ds: &Dataset) -> String {
    let d = ds.dim();
    let mut out = String::new();
    for i in 0..d {
        let _ = write!(out, "f{i},");
    }
    out.push_str("label\n");
    for (i, &y) in ds.labels.iter().enumerate() {
        for v in ds.features.row(i) {
            let _ = write!(out, "{v:?},");
        }
        let _ = writeln!(out, "{y}");
    }
    out
}

pub fn save_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    fs::write(path, to_csv(ds))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    /// Calibration holdout; may be zero when the training set doubles as holdout.
    pub holdout: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            holdout: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train > 0.0 && self.test > 0.0 && self.holdout >= 0.0) {
            return Err(invalid("train and test fractions must be positive, holdout non-negative"));
        }
        if (self.train + self.holdout + self.test - 1.0).abs() > 1e-9 {
            return Err(invalid("split fractions must sum to 1"));
        }
        Ok(())
    }

    /// `(train, holdout, test)` sizes; train and holdout round down.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((n as f64 * f) + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let holdout = floor(self.holdout).min(n - train);
        (train, holdout, n - train - holdout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub holdout: Option<Dataset>,
    pub test: Dataset,
}

/// Index partition from a seeded permutation.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    spec.validate()?;
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::derive(spec.seed, &[SPLIT_STREAM_TAG]).shuffle(&mut order);
    let (a, b, _) = spec.sizes(n);
    let test = order.split_off(a + b);
    let holdout = order.split_off(a);
    Ok([order, holdout, test])
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    let [tr, ho, te] = split_indices(ds.len(), spec)?;
    if tr.is_empty() || te.is_empty() {
        return Err(invalid("split leaves the train or test set empty"));
    }
    Ok(Splits {
        train: ds.subset(&tr)?,
        holdout: if ho.is_empty() { None } else { Some(ds.subset(&ho)?) },
        test: ds.subset(&te)?,
    })
}

/// Shuffled mini-batches for one epoch; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::derive(seed, &[BATCH_STREAM_TAG, epoch as u64]).shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Per-feature z-scoring fitted on one dataset and applied to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let (n, d) = (ds.len() as f64, ds.dim());
        let mut mean = vec![0.0; d];
        for i in 0..ds.len() {
            for (m, v) in mean.iter_mut().zip(ds.features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..ds.len() {
            for ((s, v), m) in var.iter_mut().zip(ds.features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "standardize",
                lhs: vec![ds.dim()],
                rhs: vec![self.mean.len()],
            });
        }
        let d = ds.dim();
        let data = ds
            .features
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - self.mean[k % d]) / self.std[k % d])
            .collect();
        Dataset::new(Tensor::matrix(ds.len(), d, data)?, ds.labels.clone(), ds.classes)
    }
}
