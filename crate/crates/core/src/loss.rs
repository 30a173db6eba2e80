//! Training objectives built on the gradient tape.
//!
//! Every graph builder takes class probabilities (`[rows × C]`, softmax
//! outputs) and returns a `[1×1]` loss node. Additive constants such as the
//! `log C` that separates cross-entropy against the uniform target from
//! `KL(U || p)` are never added to optimized values.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math::{clamped_ln, Tape, Tensor, Var};
use crate::stochastic::AlphaMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Baseline,
    Ci,
    Vwci,
    EntropyCi,
}

impl std::str::FromStr for LossKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "ci" => Ok(Self::Ci),
            "vwci" => Ok(Self::Vwci),
            "entropy-ci" => Ok(Self::EntropyCi),
            other => Err(invalid(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of `KL(U || p)` in the CI loss.
    pub beta: f64,
    /// Weight of the entropy bonus in the entropy-CI loss.
    pub gamma: f64,
    /// L2 coefficient on weight matrices.
    pub weight_decay: f64,
    /// Stochastic forward passes per example for VWCI.
    pub samples: usize,
    pub alpha_mode: AlphaMode,
    /// Replaces the measured normalized variance with a constant (ablations).
    #[serde(default)]
    pub forced_alpha: Option<f64>,
    /// Backpropagate through the normalized variance instead of detaching it.
    #[serde(default)]
    pub alpha_gradient: bool,
    /// Backpropagate through all `T` passes; when false only the first pass
    /// carries gradient and the rest contribute value only.
    #[serde(default = "yes")]
    pub grad_all_samples: bool,
}

fn yes() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Baseline,
            beta: 0.0,
            gamma: 0.0,
            weight_decay: 5e-4,
            samples: 5,
            alpha_mode: AlphaMode::OneMinusBc,
            forced_alpha: None,
            alpha_gradient: false,
            grad_all_samples: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("weight decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be a finite non-negative number")));
            }
        }
        if self.kind == LossKind::Vwci && self.samples == 0 {
            return Err(invalid("VWCI needs at least one stochastic sample"));
        }
        if let Some(a) = self.forced_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(invalid("forced alpha must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Forward passes drawn per example in one training step.
    pub fn passes_per_example(&self) -> usize {
        match self.kind {
            LossKind::Vwci => self.samples,
            _ => 1,
        }
    }

    /// The constant dropped from CI/VWCI values: `log C`.
    pub fn xi(classes: usize) -> f64 {
        (classes as f64).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformTarget {
    classes: usize,
}

impl UniformTarget {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(invalid("uniform target needs at least two classes"));
        }
        Ok(Self { classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn prob(&self) -> f64 {
        1.0 / self.classes as f64
    }

    pub fn vector(&self) -> Vec<f64> {
        vec![self.prob(); self.classes]
    }
}

fn column(values: impl IntoIterator<Item = f64>) -> Result<Tensor> {
    let data: Vec<f64> = values.into_iter().collect();
    Tensor::matrix(data.len(), 1, data)
}

/// `-log p(y_i)` per row, `[rows × 1]`.
fn nll_rows(tape: &mut Tape, logp: Var, labels: &[usize]) -> Result<Var> {
    let picked = tape.gather(logp, labels)?;
    tape.scale(picked, -1.0)
}

/// `KL(U || p)` per row from log-probabilities.
fn kl_uniform_rows(tape: &mut Tape, logp: Var) -> Result<Var> {
    let t = tape.value(logp);
    let (rows, classes) = (t.rows(), t.cols());
    let mean_logp = tape.row_mean(logp)?;
    let neg_log_c = tape.constant(Tensor::full(vec![rows, 1], -(classes as f64).ln()));
    tape.sub(neg_log_c, mean_logp)
}

/// Shannon entropy per row.
fn entropy_rows(tape: &mut Tape, probs: Var, logp: Var) -> Result<Var> {
    let plogp = tape.mul(probs, logp)?;
    let s = tape.row_sum(plogp)?;
    tape.scale(s, -1.0)
}

/// Mean negative log-likelihood of the labels.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log(probs)?;
    let nll = nll_rows(tape, logp, labels)?;
    tape.mean(nll)
}

/// Cross-entropy plus `beta` times the mean `KL(U || p)`.
pub fn ci_loss(tape: &mut Tape, probs: Var, labels: &[usize], beta: f64) -> Result<Var> {
    if beta < 0.0 {
        return Err(invalid("beta must be non-negative"));
    }
    let ce = cross_entropy(tape, probs, labels)?;
    let logp = tape.log(probs)?;
    let kl = kl_uniform_rows(tape, logp)?;
    let kl = tape.mean(kl)?;
    let kl = tape.scale(kl, beta)?;
    tape.add(ce, kl)
}

/// Cross-entropy minus `gamma` times the mean entropy of the prediction.
pub fn entropy_ci_loss(tape: &mut Tape, probs: Var, labels: &[usize], gamma: f64) -> Result<Var> {
    if gamma < 0.0 {
        return Err(invalid("gamma must be non-negative"));
    }
    let ce = cross_entropy(tape, probs, labels)?;
    let logp = tape.log(probs)?;
    let h = entropy_rows(tape, probs, logp)?;
    let h = tape.mean(h)?;
    let h = tape.scale(h, gamma)?;
    tape.sub(ce, h)
}

/// Where the per-example mixing weights of the VWCI loss come from.
#[derive(Debug, Clone, Copy)]
pub enum Alphas<'a> {
    /// Precomputed values, treated as constants.
    Fixed(&'a [f64]),
    /// Computed on the tape from the same probabilities, so they receive gradient.
    Differentiable(AlphaMode),
}

/// Normalized variance per example as a `[n × 1]` graph node.
///
/// `probs` holds `T` consecutive rows per example.
pub fn alpha_graph(tape: &mut Tape, probs: Var, samples: usize, mode: AlphaMode) -> Result<Var> {
    let mean = tape.group_mean(probs, samples)?;
    let mean_rows = tape.repeat_rows(mean, samples)?;
    let prod = tape.mul(probs, mean_rows)?;
    let root = tape.sqrt(prod)?;
    let bc = tape.row_sum(root)?;
    let mean_bc = tape.group_mean(bc, samples)?;
    match mode {
        AlphaMode::Bc => Ok(mean_bc),
        AlphaMode::OneMinusBc => {
            let n = tape.value(mean_bc).rows();
            let ones = tape.constant(Tensor::full(vec![n, 1], 1.0));
            tape.sub(ones, mean_bc)
        }
    }
}

/// Variance-weighted confidence-integrated loss.
///
/// `probs` has `samples` consecutive rows per example (row `i*T + j` is pass
/// `j` of example `i`); `labels` has one entry per example. The value is the
/// mean over examples of `(1/T) sum_j [(1-a_i)(-log p_j(y_i)) + a_i KL(U || p_j)]`.
pub fn vwci_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    samples: usize,
    alphas: Alphas<'_>,
    grad_all_samples: bool,
) -> Result<Var> {
    let rows = tape.value(probs).rows();
    if samples == 0 || rows != labels.len() * samples {
        return Err(invalid(format!(
            "{rows} probability rows for {} examples x {samples} samples",
            labels.len()
        )));
    }
    let row_labels: Vec<usize> = labels
        .iter()
        .flat_map(|&y| std::iter::repeat_n(y, samples))
        .collect();

    let (w_gt, w_u) = match alphas {
        Alphas::Fixed(a) => {
            if a.len() != labels.len() {
                return Err(invalid(format!("{} alphas for {} examples", a.len(), labels.len())));
            }
            if let Some(bad) = a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(invalid(format!("alpha {bad} outside [0, 1]")));
            }
            let per_row = |f: fn(f64) -> f64| {
                column(a.iter().flat_map(|&v| std::iter::repeat_n(f(v), samples)))
            };
            let w_gt = tape.constant(per_row(|v| 1.0 - v)?);
            let w_u = tape.constant(per_row(|v| v)?);
            (w_gt, w_u)
        }
        Alphas::Differentiable(mode) => {
            let alpha = alpha_graph(tape, probs, samples, mode)?;
            let w_u = tape.repeat_rows(alpha, samples)?;
            let ones = tape.constant(Tensor::full(vec![rows, 1], 1.0));
            let w_gt = tape.sub(ones, w_u)?;
            (w_gt, w_u)
        }
    };

    let logp = tape.log(probs)?;
    let nll = nll_rows(tape, logp, &row_labels)?;
    let kl = kl_uniform_rows(tape, logp)?;
    let a = tape.mul(nll, w_gt)?;
    let b = tape.mul(kl, w_u)?;
    let mut per_row = tape.add(a, b)?;

    if !grad_all_samples && samples > 1 {
        let first = column((0..rows).map(|r| if r % samples == 0 { 1.0 } else { 0.0 }))?;
        let rest = column(first.data().iter().map(|v| 1.0 - v).collect::<Vec<_>>())?;
        let first = tape.constant(first);
        let rest = tape.constant(rest);
        let frozen = tape.detach(per_row);
        let live = tape.mul(per_row, first)?;
        let frozen = tape.mul(frozen, rest)?;
        per_row = tape.add(live, frozen)?;
    }
    tape.mean(per_row)
}

/// `lambda * sum(w^2)` over the given weight nodes.
pub fn l2_penalty(tape: &mut Tape, weights: &[Var], lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(invalid("weight decay must be non-negative"));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for &w in weights {
        let sq = tape.mul(w, w)?;
        let s = tape.sum(sq)?;
        total = tape.add(total, s)?;
    }
    tape.scale(total, lambda)
}

/// `KL(U || p)` for a single distribution.
pub fn kl_uniform(p: &[f64]) -> f64 {
    let c = p.len() as f64;
    let u = 1.0 / c;
    p.iter().map(|&pc| u * (u.ln() - clamped_ln(pc))).sum()
}

/// `KL(p || U) = log C - H(p)`.
pub fn kl_to_uniform(p: &[f64]) -> f64 {
    let c = p.len() as f64;
    p.iter()
        .filter(|&&pc| pc > 0.0)
        .map(|&pc| pc * (clamped_ln(pc) + c.ln()))
        .sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&pc| pc > 0.0)
        .map(|&pc| pc * clamped_ln(pc))
        .sum::<f64>()
}

/// Evaluates a graph-built loss on concrete probabilities.
pub fn evaluate(probs: &Tensor, build: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let out = build(&mut tape, p)?;
    Ok(tape.value(out).item())
}

/// `lambda * sum(w^2)` over the weight matrices of a parameter set.
pub fn l2_penalty_value(params: &crate::model::ParameterSet, lambda: f64) -> f64 {
    let s: f64 = params.weights().flat_map(|w| w.data()).map(|v| v * v).sum();
    lambda * s
}

/// Two-component Gaussian mixture posterior against a standard-normal prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixturePriorSpec {
    /// `theta_i^T theta_i` for the two components.
    pub squared_norms: [f64; 2],
    /// Mixture weights; must sum to one.
    pub weights: [f64; 2],
    pub sigma: f64,
    pub dim: usize,
}

/// Closed-form approximation of `KL(q || p)` for a two-component mixture
/// `q = sum_i e_i N(theta_i, sigma^2 I)` and `p = N(0, I)`:
///
/// `sum_i e_i/2 (theta_i^T theta_i + D sigma - log sigma - D (1 + log 2 pi)) - H(e)/2`.
///
/// Diagnostic only; training applies the L2 term directly.
pub fn approx_kl_mixture(spec: &MixturePriorSpec) -> Result<f64> {
    if spec.sigma.is_nan() || spec.sigma <= 0.0 {
        return Err(invalid("sigma must be positive"));
    }
    if spec.dim == 0 {
        return Err(invalid("dimension must be at least one"));
    }
    let [e1, e2] = spec.weights;
    if !(0.0..=1.0).contains(&e1) || !(0.0..=1.0).contains(&e2) || ((e1 + e2) - 1.0).abs() > 1e-12 {
        return Err(invalid("mixture weights must lie in [0, 1] and sum to one"));
    }
    let d = spec.dim as f64;
    let log_2pi = (2.0 * std::f64::consts::PI).ln();
    let per_component: f64 = spec
        .weights
        .iter()
        .zip(spec.squared_norms)
        .map(|(&e, sq)| e / 2.0 * (sq + d * spec.sigma - spec.sigma.ln() - d * (1.0 + log_2pi)))
        .sum();
    let h: f64 = -spec
        .weights
        .iter()
        .filter(|&&e| e > 0.0)
        .map(|&e| e * e.ln())
        .sum::<f64>();
    Ok(per_component - 0.5 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = |p: &Tensor, y: &[usize]| evaluate(p, |t, v| cross_entropy(t, v, y)).unwrap();
        assert_eq!(ce(&probs(&[vec![1.0, 0.0], vec![0.0, 1.0]]), &[0, 1]), 0.0);
        assert!((ce(&probs(&[vec![0.5, 0.5]]), &[0]) - 2f64.ln()).abs() < 1e-15);
        let u = probs(&[vec![0.25; 4], vec![0.25; 4]]);
        assert!((ce(&u, &[0, 3]) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let p = probs(&[vec![0.5, 0.5]]);
        assert!(matches!(
            evaluate(&p, |t, v| cross_entropy(t, v, &[2])),
            Err(crate::Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn kl_uniform_examples() {
        assert!(kl_uniform(&[0.25; 4]).abs() < 1e-15);
        assert!((kl_uniform(&[0.9, 0.1]) - 0.510_825_623_765_990_7).abs() < 1e-12);
        assert!(kl_uniform(&[0.7, 0.2, 0.1]) > 0.0);
    }

    #[test]
    fn ci_examples() {
        let p = probs(&[vec![0.9, 0.1]]);
        let v = evaluate(&p, |t, x| ci_loss(t, x, &[0], 1.0)).unwrap();
        assert!((v - 0.616_186_139_423_817_4).abs() < 1e-12, "{v}");
        let u = probs(&[vec![1.0 / 3.0; 3]]);
        let v = evaluate(&u, |t, x| ci_loss(t, x, &[2], 7.0)).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
        assert!(evaluate(&p, |t, x| ci_loss(t, x, &[0], -1.0)).is_err());
    }

    #[test]
    fn vwci_examples() {
        let p = probs(&[vec![0.9, 0.1]]);
        let v = evaluate(&p, |t, x| vwci_loss(t, x, &[0], 1, Alphas::Fixed(&[0.5]), true)).unwrap();
        assert!((v - 0.308_093_069_711_908_7).abs() < 1e-12, "{v}");
        assert!(evaluate(&p, |t, x| vwci_loss(t, x, &[0], 1, Alphas::Fixed(&[1.5]), true)).is_err());
        assert!(evaluate(&p, |t, x| vwci_loss(t, x, &[0], 2, Alphas::Fixed(&[0.5]), true)).is_err());
    }

    #[test]
    fn vwci_extremes() {
        let rows = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3], vec![0.3, 0.3, 0.4], vec![0.2, 0.2, 0.6]];
        let p = probs(&rows);
        let labels = [0, 2];
        let zero = evaluate(&p, |t, x| vwci_loss(t, x, &labels, 2, Alphas::Fixed(&[0.0, 0.0]), true)).unwrap();
        let ce = evaluate(&p, |t, x| cross_entropy(t, x, &[0, 0, 2, 2])).unwrap();
        assert_eq!(zero.to_bits(), ce.to_bits());
        let one = evaluate(&p, |t, x| vwci_loss(t, x, &labels, 2, Alphas::Fixed(&[1.0, 1.0]), true)).unwrap();
        let kl = rows.iter().map(|r| kl_uniform(r)).sum::<f64>() / 4.0;
        assert!((one - kl).abs() < 1e-12);
    }

    #[test]
    fn entropy_ci_examples() {
        let p = probs(&[vec![0.9, 0.1]]);
        let v = evaluate(&p, |t, x| entropy_ci_loss(t, x, &[0], 1.0)).unwrap();
        assert!((v - (-0.219_722_457_733_621_95)).abs() < 1e-12, "{v}");
        assert!((entropy(&[0.9, 0.1]) - 0.325_082_973_391_448_2).abs() < 1e-12);
        let ce = evaluate(&p, |t, x| cross_entropy(t, x, &[0])).unwrap();
        let e0 = evaluate(&p, |t, x| entropy_ci_loss(t, x, &[0], 0.0)).unwrap();
        assert_eq!(ce.to_bits(), e0.to_bits());
    }

    #[test]
    fn reverse_kl_matches_entropy_identity() {
        for p in [vec![0.9, 0.1], vec![0.5, 0.3, 0.2], vec![0.25; 4]] {
            let c = p.len() as f64;
            assert!((kl_to_uniform(&p) - (c.ln() - entropy(&p))).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_examples() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let l = l2_penalty(&mut tape, &[w], 0.5).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        let l0 = l2_penalty(&mut tape, &[w], 0.0).unwrap();
        assert_eq!(tape.value(l0).item(), 0.0);
        let l2 = l2_penalty(&mut tape, &[w], 1.0).unwrap();
        assert_eq!(tape.value(l2).item(), 2.0 * tape.value(l).item());
    }

    #[test]
    fn approx_kl_examples() {
        let base = MixturePriorSpec {
            squared_norms: [4.0, 0.0],
            weights: [1.0, 0.0],
            sigma: 1.0,
            dim: 2,
        };
        let v = approx_kl_mixture(&base).unwrap();
        assert!((v - 0.162_122_933_590_654_66).abs() < 1e-12, "{v}");

        let bumped = MixturePriorSpec {
            squared_norms: [7.0, 0.0],
            weights: [0.5, 0.5],
            ..base
        };
        let half = MixturePriorSpec {
            weights: [0.5, 0.5],
            ..base
        };
        let dv = approx_kl_mixture(&bumped).unwrap() - approx_kl_mixture(&half).unwrap();
        assert!((dv - 0.5 * 3.0 / 2.0).abs() < 1e-12);

        // entropy-free value of the half/half mixture
        let d = 2.0;
        let no_h = 0.25 * (4.0 + d - d * (1.0 + (2.0 * std::f64::consts::PI).ln()))
            + 0.25 * (d - d * (1.0 + (2.0 * std::f64::consts::PI).ln()));
        let with_h = approx_kl_mixture(&half).unwrap();
        assert!((no_h - with_h - 0.5 * 2f64.ln()).abs() < 1e-12);

        assert!(approx_kl_mixture(&MixturePriorSpec { sigma: 0.0, ..base }).is_err());
        assert!(approx_kl_mixture(&MixturePriorSpec { weights: [0.6, 0.6], ..base }).is_err());
    }
}
