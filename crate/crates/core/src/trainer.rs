//! Heavy-ball SGD, the milestone learning-rate schedule and the training loop.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{invalid, Error, Result};
use crate::loss::{ci_loss, cross_entropy, entropy_ci_loss, l2_penalty, vwci_loss, Alphas, LossConfig, LossKind};
use crate::math::{argmax, RngStream, Tape, Tensor};
use crate::model::{init_params, logits_graph, register, sample_mask, ModelSpec, Noise, NoiseMask, ParameterSet};
use crate::stochastic::{normalized_variance, StochasticPredictionSet};

const INIT_STREAM_TAG: u64 = 0x1417;
const TRAIN_STREAM_TAG: u64 = 0x7a41;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Multiplier applied at each milestone.
    pub decay: f64,
    pub milestones: Vec<usize>,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            decay: 0.2,
            milestones: vec![30, 60, 80],
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(invalid("decay factor must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("milestones must be strictly increasing"));
        }
        self.loss.validate()
    }
}

/// `lr0 * decay^k` where `k` counts milestones at or before `epoch`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let passed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr * cfg.decay.powi(passed as i32)
}

/// One heavy-ball step: `v = momentum * v + g; theta -= lr * v`.
///
/// Nothing is modified when any gradient is non-finite.
pub fn sgd_step(theta: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != velocity.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: vec![theta.len()],
            rhs: vec![grad.len(), velocity.len()],
        });
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *t -= lr * *v;
    }
    Ok(())
}

/// Velocity buffers for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            velocity: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Updates all tensors, in canonical order, or none of them.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Vec<f64>], lr: f64, momentum: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(invalid(format!("{} gradients for {} tensors", grads.len(), self.velocity.len())));
        }
        if !grads.iter().flatten().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        for ((t, g), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            sgd_step(t.data_mut(), g, v, lr, momentum)?;
        }
        Ok(())
    }
}

/// Loss, gradients and bookkeeping for one mini-batch at fixed parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// Objective value including the weight penalty.
    pub loss: f64,
    /// One gradient per parameter tensor, canonical order.
    pub grads: Vec<Vec<f64>>,
    /// Examples whose mean stochastic prediction is correct.
    pub correct: usize,
    /// Per-example normalized variance (VWCI only).
    pub alphas: Option<Vec<f64>>,
}

/// Noise mask for pass `sample` of example `example` in a given step.
pub fn train_mask(spec: &ModelSpec, seed: u64, epoch: usize, batch: usize, example: usize, sample: usize) -> NoiseMask {
    let mut rng = RngStream::derive(
        seed,
        &[TRAIN_STREAM_TAG, epoch as u64, batch as u64, example as u64, sample as u64],
    );
    sample_mask(spec, &mut rng)
}

/// Builds the objective for `indices` and backpropagates it.
pub fn compute_batch(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    batch: usize,
) -> Result<BatchOutcome> {
    if indices.is_empty() {
        return Err(invalid("empty batch"));
    }
    let t = cfg.loss.passes_per_example();
    let (d, c) = (spec.input_dim, spec.classes);
    if data.dim() != d || data.classes != c {
        return Err(invalid(format!(
            "dataset has {} features and {} classes, model expects {d} and {c}",
            data.dim(),
            data.classes
        )));
    }
    let n = indices.len();
    let mut rows = Vec::with_capacity(n * t * d);
    let mut masks = Vec::with_capacity(n * t);
    for &i in indices {
        for j in 0..t {
            rows.extend_from_slice(data.features.row(i));
            masks.push(train_mask(spec, cfg.seed, epoch, batch, i, j));
        }
    }
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();

    let mut tape = Tape::new();
    let vars = register(&mut tape, params, true);
    let x = tape.constant(Tensor::matrix(n * t, d, rows)?);
    let logits = logits_graph(&mut tape, spec, &vars, x, Noise::Masks(&masks))?;
    let probs = tape.softmax(logits)?;

    let p = tape.value(probs).data().to_vec();
    let mut alphas = None;
    let loss_cfg = &cfg.loss;
    let data_loss = match loss_cfg.kind {
        LossKind::Baseline => cross_entropy(&mut tape, probs, &labels)?,
        LossKind::Ci => ci_loss(&mut tape, probs, &labels, loss_cfg.beta)?,
        LossKind::EntropyCi => entropy_ci_loss(&mut tape, probs, &labels, loss_cfg.gamma)?,
        LossKind::Vwci => {
            let a: Vec<f64> = match loss_cfg.forced_alpha {
                Some(a) => vec![a; n],
                None => p
                    .chunks_exact(t * c)
                    .map(|s| {
                        StochasticPredictionSet::new(t, c, s.to_vec())
                            .map(|set| normalized_variance(&set, loss_cfg.alpha_mode))
                    })
                    .collect::<Result<_>>()?,
            };
            let source = if loss_cfg.alpha_gradient && loss_cfg.forced_alpha.is_none() {
                Alphas::Differentiable(loss_cfg.alpha_mode)
            } else {
                Alphas::Fixed(&a)
            };
            let l = vwci_loss(&mut tape, probs, &labels, t, source, loss_cfg.grad_all_samples)?;
            alphas = Some(a);
            l
        }
    };
    let total = if loss_cfg.weight_decay > 0.0 {
        let pen = l2_penalty(&mut tape, &vars.weights(), loss_cfg.weight_decay)?;
        tape.add(data_loss, pen)?
    } else {
        data_loss
    };
    let loss = tape.value(total).item();
    tape.backward(total)?;
    let grads = vars
        .all()
        .into_iter()
        .map(|v| tape.grad(v).map(<[f64]>::to_vec).ok_or(Error::NonFinite("missing gradient")))
        .collect::<Result<Vec<_>>>()?;

    let mut correct = 0;
    let mut mean = vec![0.0; c];
    for (k, s) in p.chunks_exact(t * c).enumerate() {
        mean.iter_mut().for_each(|m| *m = 0.0);
        for row in s.chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        if argmax(&mean) == labels[k] {
            correct += 1;
        }
    }
    Ok(BatchOutcome {
        loss,
        grads,
        correct,
        alphas,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Example-weighted mean of the batch objectives at pre-step parameters.
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,acc,lr,seconds\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{:?},{:?},{:?},{:.6}", e.epoch, e.loss, e.acc, e.lr, e.seconds);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Parameters initialized from the run seed.
pub fn initial_params(spec: &ModelSpec, seed: u64) -> Result<ParameterSet> {
    init_params(spec, &mut RngStream::derive(seed, &[INIT_STREAM_TAG]))
}

pub fn train(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(ParameterSet, TrainLog)> {
    train_with_hook(spec, data, cfg, |_, _| Ok(()))
}

/// Trains from freshly initialized parameters, calling `hook` after every epoch.
pub fn train_with_hook(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    hook: impl FnMut(&EpochRecord, &ParameterSet) -> Result<()>,
) -> Result<(ParameterSet, TrainLog)> {
    spec.validate()?;
    let params = initial_params(spec, cfg.seed)?;
    train_from(spec, params, data, cfg, hook)
}

/// Trains starting from `params` (e.g. a loaded checkpoint).
pub fn train_from(
    spec: &ModelSpec,
    mut params: ParameterSet,
    data: &Dataset,
    cfg: &TrainConfig,
    mut hook: impl FnMut(&EpochRecord, &ParameterSet) -> Result<()>,
) -> Result<(ParameterSet, TrainLog)> {
    spec.validate()?;
    cfg.validate()?;
    params.check_spec(spec)?;
    let mut opt = Momentum::new(&params);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at_epoch(cfg, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, idx) in batches(data.len(), cfg.batch_size, cfg.seed, epoch)?.iter().enumerate() {
            let diverged = |loss: f64| Error::Diverged { epoch, batch: b, loss };
            let out = match compute_batch(spec, &params, data, idx, cfg, epoch, b) {
                Ok(o) => o,
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() {
                return Err(diverged(out.loss));
            }
            match opt.step(&mut params, &out.grads, lr, cfg.momentum) {
                Err(Error::NonFinite(_)) => return Err(diverged(out.loss)),
                r => r?,
            }
            if !params.all_finite() {
                return Err(diverged(out.loss));
            }
            loss_sum += out.loss * idx.len() as f64;
            correct += out.correct;
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            acc: correct as f64 / data.len() as f64,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        log.entries.push(record);
        hook(&record, &params)?;
    }
    Ok((params, log))
}
