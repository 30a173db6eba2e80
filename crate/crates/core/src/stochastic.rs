//! Monte-Carlo inference over noise masks: predictive mean, predictive
//! covariance, Bhattacharyya coefficients and the normalized variance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{RngStream, Tensor};
use crate::model::{logits_stochastic, sample_mask, ModelSpec, NoiseMask, ParameterSet};

/// Stream tag for inference-time masks.
pub const MC_STREAM_TAG: u64 = 0x4d43;

const EXAMPLES_PER_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StochasticConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for StochasticConfig {
    fn default() -> Self {
        Self { samples: 5, seed: 0 }
    }
}

/// How the mean Bhattacharyya coefficient maps to the normalized variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    /// `1 - mean BC`: zero under perfect agreement.
    #[default]
    OneMinusBc,
    /// `mean BC` itself.
    Bc,
}

impl std::str::FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-minus-bc" => Ok(Self::OneMinusBc),
            "bc" => Ok(Self::Bc),
            other => Err(invalid(format!("unknown alpha mode {other:?}"))),
        }
    }
}

/// `T` probability vectors for one example, stored `T × C` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPredictionSet {
    samples: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl StochasticPredictionSet {
    pub fn new(samples: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if samples == 0 || classes == 0 || probs.len() != samples * classes {
            return Err(invalid(format!(
                "{} values for {samples} samples x {classes} classes",
                probs.len()
            )));
        }
        for row in probs.chunks_exact(classes) {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(invalid("prediction rows must be probability vectors"));
            }
        }
        Ok(Self {
            samples,
            classes,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        Self::new(rows.len(), classes, rows.concat())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.probs[j * self.classes..(j + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.classes)
    }
}

/// Summary of one example's stochastic predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub mean: Vec<f64>,
    /// `C × C`
    pub covariance: Tensor,
    pub alpha: f64,
}

pub fn summarize(set: &StochasticPredictionSet, mode: AlphaMode) -> PredictiveSummary {
    PredictiveSummary {
        mean: predictive_mean(set),
        covariance: predictive_covariance(set),
        alpha: normalized_variance(set, mode),
    }
}

/// Draws `T` masks per example and records the resulting class probabilities.
///
/// The mask for sample `j` of example `i` comes from its own stream
/// `(seed, [tag, i, j])`, so results do not depend on chunking or scheduling.
pub fn mc_predict(
    spec: &ModelSpec,
    x: &Tensor,
    params: &ParameterSet,
    cfg: &StochasticConfig,
) -> Result<Vec<StochasticPredictionSet>> {
    Ok(mc_logits(spec, x, params, cfg)?
        .into_iter()
        .map(|logits| {
            let c = spec.classes;
            let mut probs = vec![0.0; logits.len()];
            for (z, p) in logits.chunks_exact(c).zip(probs.chunks_exact_mut(c)) {
                crate::math::softmax_row(z, p);
            }
            StochasticPredictionSet {
                samples: cfg.samples,
                classes: c,
                probs,
            }
        })
        .collect())
}

/// Per-example `T × C` logits under sampled masks (flattened row-major).
pub fn mc_logits(spec: &ModelSpec, x: &Tensor, params: &ParameterSet, cfg: &StochasticConfig) -> Result<Vec<Vec<f64>>> {
    if cfg.samples == 0 {
        return Err(invalid("stochastic inference needs at least one sample"));
    }
    if x.shape().len() != 2 || x.cols() != spec.input_dim {
        return Err(Error::ShapeMismatch {
            op: "mc_predict",
            lhs: x.shape().to_vec(),
            rhs: vec![spec.input_dim],
        });
    }
    let n = x.rows();
    let t = cfg.samples;
    let d = spec.input_dim;
    let c = spec.classes;
    let starts: Vec<usize> = (0..n).step_by(EXAMPLES_PER_CHUNK).collect();
    let chunks = starts
        .par_iter()
        .map(|&start| {
            let end = (start + EXAMPLES_PER_CHUNK).min(n);
            let mut rows = Vec::with_capacity((end - start) * t * d);
            let mut masks: Vec<NoiseMask> = Vec::with_capacity((end - start) * t);
            for i in start..end {
                for j in 0..t {
                    rows.extend_from_slice(x.row(i));
                    let mut rng = RngStream::derive(cfg.seed, &[MC_STREAM_TAG, i as u64, j as u64]);
                    masks.push(sample_mask(spec, &mut rng));
                }
            }
            let xs = Tensor::matrix((end - start) * t, d, rows)?;
            let z = logits_stochastic(spec, &xs, params, &masks)?;
            Ok(z.data().chunks_exact(t * c).map(<[f64]>::to_vec).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Arithmetic mean over the `T` rows.
///
/// Accumulated as deviations from the first row, so a set of identical rows
/// returns that row exactly.
pub fn predictive_mean(set: &StochasticPredictionSet) -> Vec<f64> {
    let first = set.row(0);
    let mut dev = vec![0.0; set.classes];
    for row in set.rows().skip(1) {
        for ((d, &p), &f) in dev.iter_mut().zip(row).zip(first) {
            *d += p - f;
        }
    }
    let t = set.samples as f64;
    first.iter().zip(dev).map(|(&f, d)| f + d / t).collect()
}

/// Plug-in covariance `E[(y - m)(y - m)^T]` (divides by `T`), accumulated
/// from centered rows so identical rows give exactly zero.
pub fn predictive_covariance(set: &StochasticPredictionSet) -> Tensor {
    let c = set.classes;
    let t = set.samples as f64;
    let mean = predictive_mean(set);
    let mut cov = vec![0.0; c * c];
    let mut dev = vec![0.0; c];
    for row in set.rows() {
        for ((d, &p), &m) in dev.iter_mut().zip(row).zip(&mean) {
            *d = p - m;
        }
        for a in 0..c {
            for b in a..c {
                cov[a * c + b] += dev[a] * dev[b];
            }
        }
    }
    for a in 0..c {
        for b in a..c {
            let v = cov[a * c + b] / t;
            cov[a * c + b] = v;
            cov[b * c + a] = v;
        }
    }
    Tensor::matrix(c, c, cov).expect("square")
}

/// `sum_c sqrt(p_c q_c)`.
pub fn bhattacharyya(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "bhattacharyya",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    if p.iter().chain(q).any(|&v| v < 0.0 || v.is_nan()) {
        return Err(invalid("Bhattacharyya coefficient needs non-negative entries"));
    }
    Ok(p.iter().zip(q).map(|(&a, &b)| (a * b).sqrt()).sum())
}

/// Mean Bhattacharyya coefficient between each row and the predictive mean.
pub fn mean_bhattacharyya(set: &StochasticPredictionSet) -> f64 {
    let mean = predictive_mean(set);
    let total: f64 = set
        .rows()
        .map(|row| row.iter().zip(&mean).map(|(&a, &b)| (a * b).sqrt()).sum::<f64>())
        .sum();
    total / set.samples as f64
}

/// Normalized variance in `[0, 1]`.
pub fn normalized_variance(set: &StochasticPredictionSet, mode: AlphaMode) -> f64 {
    let bc = mean_bhattacharyya(set).clamp(0.0, 1.0);
    match mode {
        AlphaMode::OneMinusBc => 1.0 - bc,
        AlphaMode::Bc => bc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_deterministic, init_params, logits_deterministic};

    fn set(rows: &[Vec<f64>]) -> StochasticPredictionSet {
        StochasticPredictionSet::from_rows(rows).unwrap()
    }

    #[test]
    fn mean_examples() {
        assert_eq!(predictive_mean(&set(&[vec![1.0, 0.0], vec![0.0, 1.0]])), vec![0.5, 0.5]);
        let p = vec![0.2, 0.5, 0.3];
        let m = predictive_mean(&set(&[p.clone(), p.clone(), p.clone()]));
        for (a, b) in m.iter().zip(&p) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn covariance_examples() {
        let c = predictive_covariance(&set(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert_eq!(c.data(), &[0.25, -0.25, -0.25, 0.25]);
        let p = vec![0.2, 0.5, 0.3];
        let z = predictive_covariance(&set(&[p.clone(), p.clone()]));
        assert!(z.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn bhattacharyya_examples() {
        let p = [0.2, 0.5, 0.3];
        assert!((bhattacharyya(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        assert!((bhattacharyya(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((bhattacharyya(&[0.9, 0.1], &[0.1, 0.9]).unwrap() - 0.6).abs() < 1e-15);
        assert!(bhattacharyya(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn normalized_variance_examples() {
        let p = vec![0.2, 0.5, 0.3];
        assert_eq!(normalized_variance(&set(&[p.clone(), p.clone()]), AlphaMode::OneMinusBc), 0.0);
        let a = normalized_variance(&set(&[vec![1.0, 0.0], vec![0.0, 1.0]]), AlphaMode::OneMinusBc);
        assert!((a - (1.0 - 0.5f64.sqrt())).abs() < 1e-15);
        let b = normalized_variance(&set(&[vec![1.0, 0.0], vec![0.0, 1.0]]), AlphaMode::Bc);
        assert!((b - 0.5f64.sqrt()).abs() < 1e-15);
        assert!("nope".parse::<AlphaMode>().is_err());
    }

    #[test]
    fn set_validation() {
        assert!(StochasticPredictionSet::new(0, 2, vec![]).is_err());
        assert!(StochasticPredictionSet::new(1, 2, vec![0.7, 0.7]).is_err());
    }

    #[test]
    fn mc_predict_noise_free_rows_identical() {
        let spec = ModelSpec::mlp(2, &[6], 3).with_residual(1, 1.0);
        let p = init_params(&spec, &mut RngStream::new(1, 1)).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.3, -1.0, 1.2, 0.4]).unwrap();
        let cfg = StochasticConfig { samples: 4, seed: 9 };
        let sets = mc_predict(&spec, &x, &p, &cfg).unwrap();
        let det = forward_deterministic(&spec, &x, &p).unwrap();
        for (i, s) in sets.iter().enumerate() {
            for row in s.rows() {
                assert_eq!(row, det.row(i));
            }
        }
        assert!(mc_predict(&spec, &x, &p, &StochasticConfig { samples: 0, seed: 0 }).is_err());
    }

    #[test]
    fn mc_predict_is_reproducible() {
        let spec = ModelSpec::mlp(2, &[8], 3).with_dropout(0.5);
        let p = init_params(&spec, &mut RngStream::new(1, 1)).unwrap();
        let x = Tensor::matrix(300, 2, (0..600).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let cfg = StochasticConfig { samples: 3, seed: 5 };
        let a = mc_predict(&spec, &x, &p, &cfg).unwrap();
        let b = mc_predict(&spec, &x, &p, &cfg).unwrap();
        assert_eq!(a, b);
        // a prefix of the inputs sees the same masks
        let head = Tensor::matrix(10, 2, x.data()[..20].to_vec()).unwrap();
        let c = mc_predict(&spec, &head, &p, &cfg).unwrap();
        assert_eq!(&a[..10], c.as_slice());
    }

    #[test]
    fn mc_mean_of_linear_toy_net_matches_expectation() {
        // One hidden layer and one residual block, all weights and inputs
        // positive so every ReLU stays in its linear regime; the logits are
        // then linear in each independent mask and the MC mean must agree
        // with the expectation pass.
        let spec = ModelSpec::mlp(2, &[3], 2).with_dropout(0.5).with_residual(1, 0.8);
        let mut p = init_params(&spec, &mut RngStream::new(1, 1)).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
        }
        let x = Tensor::matrix(1, 2, vec![0.5, 1.5]).unwrap();
        let t = 10_000;
        let logits = mc_logits(&spec, &x, &p, &StochasticConfig { samples: t, seed: 3 }).unwrap();
        let det = logits_deterministic(&spec, &x, &p).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = logits[0].chunks_exact(2).map(|r| r[c]).collect();
            let mean = vals.iter().sum::<f64>() / t as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
            let se = (var / t as f64).sqrt();
            assert!((mean - det.row(0)[c]).abs() < 3.0 * se, "class {c}: {mean} vs {}", det.row(0)[c]);
        }
    }
}
