//! Calibration metrics, reliability and coverage data, variance histograms,
//! and temperature scaling.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{argmax, clamped_ln, softmax_row, Tensor};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_BINS: usize = 20;

/// One scored example.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: usize,
    pub label: usize,
    pub predicted: usize,
    /// Score of the predicted class.
    pub confidence: f64,
    pub scores: Vec<f64>,
}

impl PredictionRecord {
    pub fn new(id: usize, label: usize, scores: Vec<f64>) -> Result<Self> {
        if label >= scores.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: scores.len(),
            });
        }
        let total: f64 = scores.iter().sum();
        if (total - 1.0).abs() > 1e-9 || scores.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return Err(invalid(format!("scores of record {id} are not a probability vector")));
        }
        let predicted = argmax(&scores);
        Ok(Self {
            id,
            label,
            predicted,
            confidence: scores[predicted],
            scores,
        })
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }
}

/// Records from a `[n × C]` probability matrix; ids are row indices.
pub fn records_from_probs(probs: &Tensor, labels: &[usize]) -> Result<Vec<PredictionRecord>> {
    if probs.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "records",
            lhs: probs.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| PredictionRecord::new(i, y, probs.row(i).to_vec()))
        .collect()
}

pub fn accuracy(records: &[PredictionRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64
}

/// Which score places a record in a bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinKey {
    /// Max score (the predicted confidence).
    #[default]
    Max,
    /// Score assigned to the true label.
    Truth,
}

impl std::str::FromStr for BinKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "truth" => Ok(Self::Truth),
            other => Err(invalid(format!("unknown bin key {other:?}"))),
        }
    }
}

impl BinKey {
    fn value(self, r: &PredictionRecord) -> f64 {
        match self {
            Self::Max => r.confidence,
            Self::Truth => r.scores[r.label],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub acc: f64,
    pub conf: f64,
}

impl CalibrationBin {
    pub fn gap(&self) -> f64 {
        (self.acc - self.conf).abs()
    }
}

/// Zero-based index of the bin `((m-1)/M, m/M]` holding `value`; 0 goes to the first bin.
pub fn bin_index(value: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut k = (value * m).ceil().clamp(1.0, m) as usize;
    // undo rounding that pushed a boundary value into the next bin
    if k > 1 && value <= (k - 1) as f64 / m {
        k -= 1;
    }
    if k < bins && value > k as f64 / m {
        k += 1;
    }
    k - 1
}

fn bin_edges(bins: usize, i: usize) -> (f64, f64) {
    (i as f64 / bins as f64, (i + 1) as f64 / bins as f64)
}

fn finish_bin(bins: usize, i: usize, count: usize, correct: usize, conf_sum: f64) -> CalibrationBin {
    let (lo, hi) = bin_edges(bins, i);
    let (acc, conf) = if count == 0 {
        (0.0, 0.0)
    } else {
        (correct as f64 / count as f64, conf_sum / count as f64)
    };
    CalibrationBin {
        lo,
        hi,
        count,
        acc,
        conf,
    }
}

/// Partitions records into `bins` equal-width confidence bins.
pub fn bin_predictions(records: &[PredictionRecord], bins: usize, key: BinKey) -> Result<Vec<CalibrationBin>> {
    if bins == 0 {
        return Err(invalid("need at least one bin"));
    }
    let mut members: Vec<Vec<&PredictionRecord>> = vec![Vec::new(); bins];
    for r in records {
        members[bin_index(key.value(r), bins)].push(r);
    }
    Ok(members
        .iter()
        .enumerate()
        .map(|(i, rs)| {
            let correct = rs.iter().filter(|r| r.correct()).count();
            let conf_sum = rs.iter().fold(0.0, |s, r| s + r.confidence);
            finish_bin(bins, i, rs.len(), correct, conf_sum)
        })
        .collect())
}

/// `sum_m |B_m|/N |acc - conf|`.
pub fn ece(bins: &[CalibrationBin], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(invalid("ECE over zero records"));
    }
    Ok(bins
        .iter()
        .filter(|b| b.count > 0)
        .fold(0.0, |s, b| s + b.count as f64 / n as f64 * b.gap()))
}

/// Largest `|acc - conf|` over non-empty bins.
pub fn mce(bins: &[CalibrationBin]) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(CalibrationBin::gap)
        .fold(0.0, f64::max)
}

/// Single-pass accumulator producing the same bins as [`bin_predictions`].
#[derive(Debug, Clone)]
pub struct StreamingCalibration {
    bins: usize,
    key: BinKey,
    count: Vec<usize>,
    correct: Vec<usize>,
    conf_sum: Vec<f64>,
    seen: usize,
}

impl StreamingCalibration {
    pub fn new(bins: usize, key: BinKey) -> Result<Self> {
        if bins == 0 {
            return Err(invalid("need at least one bin"));
        }
        Ok(Self {
            bins,
            key,
            count: vec![0; bins],
            correct: vec![0; bins],
            conf_sum: vec![0.0; bins],
            seen: 0,
        })
    }

    pub fn push(&mut self, r: &PredictionRecord) {
        let i = bin_index(self.key.value(r), self.bins);
        self.count[i] += 1;
        self.correct[i] += usize::from(r.correct());
        self.conf_sum[i] += r.confidence;
        self.seen += 1;
    }

    pub fn seen(&self) -> usize {
        self.seen
    }

    pub fn bins(&self) -> Vec<CalibrationBin> {
        (0..self.bins)
            .map(|i| finish_bin(self.bins, i, self.count[i], self.correct[i], self.conf_sum[i]))
            .collect()
    }

    pub fn ece(&self) -> Result<f64> {
        ece(&self.bins(), self.seen)
    }

    pub fn mce(&self) -> f64 {
        mce(&self.bins())
    }
}

/// Summed negative log-likelihood of the true labels.
pub fn nll_sum(records: &[PredictionRecord]) -> f64 {
    records.iter().map(|r| -clamped_ln(r.scores[r.label])).sum()
}

/// Per-example mean negative log-likelihood.
pub fn nll(records: &[PredictionRecord]) -> f64 {
    nll_sum(records) / records.len().max(1) as f64
}

pub fn brier_sum(records: &[PredictionRecord]) -> f64 {
    records
        .iter()
        .map(|r| {
            r.scores
                .iter()
                .enumerate()
                .map(|(j, &p)| {
                    let target = if j == r.label { 1.0 } else { 0.0 };
                    (p - target) * (p - target)
                })
                .sum::<f64>()
        })
        .sum()
}

/// Per-example mean Brier score.
pub fn brier(records: &[PredictionRecord]) -> f64 {
    brier_sum(records) / records.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub t: f64,
    pub frac: f64,
}

/// `0, 1/20, ..., 1`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Fraction of all records that are correct with confidence at least `t`.
pub fn coverage_curve(records: &[PredictionRecord], thresholds: &[f64]) -> Result<Vec<CoveragePoint>> {
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(invalid(format!("threshold {t} outside [0, 1]")));
    }
    let n = records.len().max(1) as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hits = records.iter().filter(|r| r.correct() && r.confidence >= t).count();
            CoveragePoint {
                t,
                frac: hits as f64 / n,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub format_version: u32,
    pub n: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub nll: f64,
    pub brier: f64,
    pub nll_sum: f64,
    pub brier_sum: f64,
    pub bins: Vec<CalibrationBin>,
    pub coverage: Vec<CoveragePoint>,
}

impl CalibrationReport {
    pub fn build(records: &[PredictionRecord], bins: usize, key: BinKey, thresholds: &[f64]) -> Result<Self> {
        let binned = bin_predictions(records, bins, key)?;
        Ok(Self {
            format_version: REPORT_FORMAT_VERSION,
            n: records.len(),
            accuracy: accuracy(records),
            ece: ece(&binned, records.len())?,
            mce: mce(&binned),
            nll: nll(records),
            brier: brier(records),
            nll_sum: nll_sum(records),
            brier_sum: brier_sum(records),
            bins: binned,
            coverage: coverage_curve(records, thresholds)?,
        })
    }
}

/// Reliability of predictions grouped by normalized variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
    /// Fraction of all records in this bin or any earlier one.
    pub coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceBinning {
    /// Equal-width bins over `[0, 1]`.
    #[default]
    EqualWidth,
    /// Quantile bins holding (nearly) equal numbers of records.
    EqualCount,
}

impl std::str::FromStr for VarianceBinning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-width" => Ok(Self::EqualWidth),
            "equal-count" => Ok(Self::EqualCount),
            other => Err(invalid(format!("unknown variance binning {other:?}"))),
        }
    }
}

/// Groups records by their normalized variance.
pub fn variance_histogram(
    alphas: &[f64],
    records: &[PredictionRecord],
    bins: usize,
    binning: VarianceBinning,
) -> Result<Vec<VarianceBin>> {
    if alphas.len() != records.len() {
        return Err(Error::ShapeMismatch {
            op: "variance_histogram",
            lhs: vec![alphas.len()],
            rhs: vec![records.len()],
        });
    }
    if bins == 0 {
        return Err(invalid("need at least one bin"));
    }
    if records.is_empty() {
        return Err(invalid("variance histogram over zero records"));
    }
    let n = records.len();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); bins];
    let mut edges: Vec<(f64, f64)> = (0..bins).map(|i| bin_edges(bins, i)).collect();
    match binning {
        VarianceBinning::EqualWidth => {
            for (i, &a) in alphas.iter().enumerate() {
                groups[bin_index(a, bins)].push(i);
            }
        }
        VarianceBinning::EqualCount => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| alphas[a].total_cmp(&alphas[b]).then(a.cmp(&b)));
            for (k, group) in groups.iter_mut().enumerate() {
                let (s, e) = (k * n / bins, (k + 1) * n / bins);
                *group = order[s..e].to_vec();
                edges[k] = match (group.first(), group.last()) {
                    (Some(&f), Some(&l)) => (alphas[f], alphas[l]),
                    _ => (f64::NAN, f64::NAN),
                };
            }
        }
    }
    let mut cumulative = 0usize;
    Ok(groups
        .iter()
        .zip(edges)
        .map(|(g, (lo, hi))| {
            cumulative += g.len();
            let count = g.len();
            let (accuracy, confidence) = if count == 0 {
                (0.0, 0.0)
            } else {
                let correct = g.iter().filter(|&&i| records[i].correct()).count();
                let conf = g.iter().fold(0.0, |s, &i| s + records[i].confidence);
                (correct as f64 / count as f64, conf / count as f64)
            };
            VarianceBin {
                lo,
                hi,
                count,
                accuracy,
                confidence,
                coverage: cumulative as f64 / n as f64,
            }
        })
        .collect())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let r = (start + end - 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation; tied values share their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "spearman",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    if x.len() < 2 || x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(invalid("rank correlation needs at least two finite pairs"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(invalid("rank correlation is undefined for a constant input"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// A strictly positive softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(invalid(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self(tau))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `softmax(z / tau)` row by row.
pub fn apply_temperature(logits: &Tensor, tau: Temperature) -> Result<Tensor> {
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits"));
    }
    let c = logits.cols();
    let mut out = vec![0.0; logits.len()];
    let mut scaled = vec![0.0; c];
    for (z, p) in logits.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        for (s, &v) in scaled.iter_mut().zip(z) {
            *s = v / tau.0;
        }
        softmax_row(&scaled, p);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean negative log-likelihood of `softmax(z / tau)`.
pub fn temperature_nll(logits: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let c = logits.cols();
    let total: f64 = logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .map(|(z, &y)| {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
            let lse = z.iter().map(|&v| (v / tau - max).exp()).sum::<f64>().ln() + max;
            lse - z[y] / tau
        })
        .sum();
    total / labels.len() as f64
}

const LOG_TAU_RANGE: (f64, f64) = (-2.995_732_273_553_991, 2.995_732_273_553_991); // ln 0.05, ln 20
const LOG_TAU_TOL: f64 = 1e-4;

/// Fits a global temperature by golden-section search of the held-out NLL over `log tau`.
///
/// The result never has higher NLL than `tau = 1`.
pub fn fit_temperature(logits: &Tensor, labels: &[usize]) -> Result<Temperature> {
    if labels.is_empty() || logits.rows() != labels.len() {
        return Err(invalid("temperature fitting needs a non-empty holdout with one label per row"));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits"));
    }
    let c = logits.cols();
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::LabelOutOfRange { label: y, classes: c });
    }
    let f = |u: f64| temperature_nll(logits, labels, u.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LOG_TAU_RANGE;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > LOG_TAU_TOL {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
    }
    let u = 0.5 * (a + b);
    let tau = if f(u) <= f(0.0) { u.exp() } else { 1.0 };
    Temperature::new(tau)
}
