//! Shared steps of the commands: training a resolved run, predicting, scoring.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use calibforge_core::calib::{
    default_thresholds, records_from_probs, BinKey, CalibrationReport, PredictionRecord,
};
use calibforge_core::data::Dataset;
use calibforge_core::math::Tensor;
use calibforge_core::model::{forward_deterministic, logits_deterministic, save_checkpoint, ModelSpec, ParameterSet};
use calibforge_core::stochastic::{mc_predict, normalized_variance, predictive_mean, AlphaMode, StochasticConfig};
use calibforge_core::trainer::{train_with_hook, TrainLog};
use calibforge_core::Result;

use crate::config::{PreparedData, RunConfig};

/// Trains the run, writing periodic checkpoints into `checkpoint_dir` when asked.
pub fn train_run(
    cfg: &RunConfig,
    data: &PreparedData,
    checkpoint_every: Option<usize>,
    checkpoint_dir: Option<&Path>,
) -> Result<(ParameterSet, TrainLog)> {
    train_with_hook(&cfg.model, &data.train, &cfg.train, |rec, params| {
        if let (Some(k), Some(dir)) = (checkpoint_every, checkpoint_dir) {
            if k > 0 && (rec.epoch + 1) % k == 0 {
                save_checkpoint(dir.join(format!("checkpoint-{}.json", rec.epoch + 1)), &cfg.model, params)?;
            }
        }
        Ok(())
    })
}

/// Class probabilities for a dataset, with per-example normalized variance
/// when predictions average stochastic passes.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub probs: Tensor,
    pub alphas: Option<Vec<f64>>,
}

pub fn predict(
    spec: &ModelSpec,
    params: &ParameterSet,
    ds: &Dataset,
    stochastic: Option<(StochasticConfig, AlphaMode)>,
) -> Result<Predictions> {
    match stochastic {
        None => Ok(Predictions {
            probs: forward_deterministic(spec, &ds.features, params)?,
            alphas: None,
        }),
        Some((cfg, mode)) => {
            let sets = mc_predict(spec, &ds.features, params, &cfg)?;
            let mut data = Vec::with_capacity(sets.len() * spec.classes);
            let mut alphas = Vec::with_capacity(sets.len());
            for s in &sets {
                data.extend(predictive_mean(s));
                alphas.push(normalized_variance(s, mode));
            }
            Ok(Predictions {
                probs: Tensor::matrix(sets.len(), spec.classes, data)?,
                alphas: Some(alphas),
            })
        }
    }
}

/// Headline metrics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ece: f64,
    pub mce: f64,
    pub nll: f64,
    pub brier: f64,
    pub acc: f64,
}

impl From<&CalibrationReport> for Metrics {
    fn from(r: &CalibrationReport) -> Self {
        Self {
            ece: r.ece,
            mce: r.mce,
            nll: r.nll,
            brier: r.brier,
            acc: r.accuracy,
        }
    }
}

pub fn report(records: &[PredictionRecord], bins: usize, key: BinKey) -> Result<CalibrationReport> {
    CalibrationReport::build(records, bins, key, &default_thresholds())
}

/// Deterministic test-split report of a trained model.
pub fn score(spec: &ModelSpec, params: &ParameterSet, ds: &Dataset, bins: usize, key: BinKey) -> Result<CalibrationReport> {
    let p = predict(spec, params, ds, None)?;
    report(&records_from_probs(&p.probs, &ds.labels)?, bins, key)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn predictions_csv(records: &[PredictionRecord]) -> String {
    let classes = records.first().map_or(0, |r| r.scores.len());
    let mut out = String::from("id,label,pred,confidence");
    for c in 0..classes {
        let _ = write!(out, ",score_{c}");
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{},{},{:?}", r.id, r.label, r.predicted, r.confidence);
        for s in &r.scores {
            let _ = write!(out, ",{s:?}");
        }
        out.push('\n');
    }
    out
}

pub fn logits_csv(logits: &Tensor, labels: &[usize]) -> String {
    let mut out = String::from("id,label");
    for c in 0..logits.cols() {
        let _ = write!(out, ",logit_{c}");
    }
    out.push('\n');
    for (i, y) in labels.iter().enumerate() {
        let _ = write!(out, "{i},{y}");
        for z in logits.row(i) {
            let _ = write!(out, ",{z:?}");
        }
        out.push('\n');
    }
    out
}

/// Parses a logit dump written by `eval`.
pub fn parse_logits_csv(text: &str) -> Result<(Tensor, Vec<usize>)> {
    let parse_err = |line: usize, msg: String| calibforge_core::Error::Parse { line, msg };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "id" || cols[1] != "label" || !cols[2..].iter().all(|c| c.starts_with("logit_")) {
        return Err(parse_err(1, "expected header id,label,logit_0,...".into()));
    }
    let c = cols.len() - 2;
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != c + 2 {
            return Err(parse_err(k + 2, format!("expected {} fields", c + 2)));
        }
        labels.push(fields[1].trim().parse().map_err(|_| parse_err(k + 2, "bad label".into()))?);
        for f in &fields[2..] {
            data.push(f.trim().parse().map_err(|_| parse_err(k + 2, format!("bad number {f:?}")))?);
        }
    }
    Ok((Tensor::matrix(labels.len(), c, data)?, labels))
}

/// Deterministic logits for a dataset.
pub fn logits(spec: &ModelSpec, params: &ParameterSet, ds: &Dataset) -> Result<Tensor> {
    logits_deterministic(spec, &ds.features, params)
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
