//! MLP classifiers with dropout sites and gated residual blocks.
//!
//! Layout: `input -> [linear -> relu -> dropout] x hidden -> residual blocks -> linear -> softmax`.
//! A residual block computes `x + g * (W2 relu(W1 x + b1) + b2)` at a constant width.
//! During training `g` is a Bernoulli gate and dropout is inverted (kept units are
//! scaled by `1/keep`); at test time `g` is replaced by its survival probability and
//! dropout sites pass activations through unchanged.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{RngStream, Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    /// Keep probability of the dropout site after each hidden layer.
    pub keep: Vec<f64>,
    pub residual_blocks: usize,
    /// Survival probability of each residual block.
    pub survival: Vec<f64>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    /// Plain MLP with no stochastic components.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            classes,
            keep: vec![1.0; hidden.len()],
            residual_blocks: 0,
            survival: Vec::new(),
            activation: Activation::Relu,
        }
    }

    /// Same keep probability at every dropout site.
    pub fn with_dropout(mut self, keep: f64) -> Self {
        self.keep = vec![keep; self.hidden.len()];
        self
    }

    /// Appends `blocks` residual blocks sharing one survival probability.
    pub fn with_residual(mut self, blocks: usize, survival: f64) -> Self {
        self.residual_blocks = blocks;
        self.survival = vec![survival; blocks];
        self
    }

    /// Width the residual stack operates at.
    pub fn block_width(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(invalid("input dimension must be positive"));
        }
        if self.classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden widths must be positive"));
        }
        if self.keep.len() != self.hidden.len() {
            return Err(invalid(format!(
                "{} keep probabilities for {} dropout sites",
                self.keep.len(),
                self.hidden.len()
            )));
        }
        if self.survival.len() != self.residual_blocks {
            return Err(invalid(format!(
                "{} survival probabilities for {} residual blocks",
                self.survival.len(),
                self.residual_blocks
            )));
        }
        let in_unit = |p: &f64| *p > 0.0 && *p <= 1.0;
        if !self.keep.iter().all(in_unit) || !self.survival.iter().all(in_unit) {
            return Err(invalid("probabilities must lie in (0, 1]"));
        }
        Ok(())
    }

    /// True when some noise site can actually drop something.
    pub fn is_stochastic(&self) -> bool {
        self.keep.iter().chain(&self.survival).any(|&p| p < 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[fan_in × fan_out]`
    pub weight: Tensor,
    /// `[1 × fan_out]`
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("shape"),
            bias: Tensor::zeros(vec![1, fan_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub inner: Linear,
    pub outer: Linear,
}

/// The deterministic parameters of a network.
///
/// Also used as a same-shaped container for gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub hidden: Vec<Linear>,
    pub blocks: Vec<ResidualBlock>,
    pub head: Linear,
}

impl ParameterSet {
    fn linears(&self) -> impl Iterator<Item = &Linear> {
        self.hidden
            .iter()
            .chain(self.blocks.iter().flat_map(|b| [&b.inner, &b.outer]))
            .chain(std::iter::once(&self.head))
    }

    /// All tensors in canonical order (weight then bias, layer by layer).
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.linears().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.hidden
            .iter_mut()
            .chain(self.blocks.iter_mut().flat_map(|b| [&mut b.inner, &mut b.outer]))
            .chain(std::iter::once(&mut self.head))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Stable names matching [`ParameterSet::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.hidden.len() {
            names.push(format!("hidden.{i}.weight"));
            names.push(format!("hidden.{i}.bias"));
        }
        for i in 0..self.blocks.len() {
            for part in ["inner", "outer"] {
                names.push(format!("block.{i}.{part}.weight"));
                names.push(format!("block.{i}.{part}.bias"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Weight matrices only (biases excluded).
    pub fn weights(&self) -> impl Iterator<Item = &Tensor> {
        self.linears().map(|l| &l.weight)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            t.clear_grad();
        }
        z
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Checks tensor shapes against a spec.
    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        let expected = init_params(spec, &mut RngStream::new(0, 0))?;
        let ours = self.tensors();
        let theirs = expected.tensors();
        if ours.len() != theirs.len() {
            return Err(invalid("parameter count does not match the model spec"));
        }
        for (a, b) in ours.iter().zip(theirs) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "parameters",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Scaled-uniform fan-in/fan-out initialization; biases start at zero.
pub fn init_params(spec: &ModelSpec, rng: &mut RngStream) -> Result<ParameterSet> {
    spec.validate()?;
    let mut width = spec.input_dim;
    let mut hidden = Vec::with_capacity(spec.hidden.len());
    for &w in &spec.hidden {
        hidden.push(Linear::init(width, w, rng));
        width = w;
    }
    let blocks = (0..spec.residual_blocks)
        .map(|_| ResidualBlock {
            inner: Linear::init(width, width, rng),
            outer: Linear::init(width, width, rng),
        })
        .collect();
    let head = Linear::init(width, spec.classes, rng);
    Ok(ParameterSet {
        hidden,
        blocks,
        head,
    })
}

/// One realization of the multiplicative binary noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseMask {
    /// Per dropout site, one entry per hidden unit.
    pub units: Vec<Vec<bool>>,
    /// One gate per residual block.
    pub gates: Vec<bool>,
}

impl NoiseMask {
    /// The mask that keeps everything.
    pub fn full(spec: &ModelSpec) -> Self {
        Self {
            units: spec.hidden.iter().map(|&w| vec![true; w]).collect(),
            gates: vec![true; spec.residual_blocks],
        }
    }

    fn matches(&self, spec: &ModelSpec) -> bool {
        self.units.len() == spec.hidden.len()
            && self.units.iter().zip(&spec.hidden).all(|(u, &w)| u.len() == w)
            && self.gates.len() == spec.residual_blocks
    }

    pub fn entries(&self) -> impl Iterator<Item = bool> + '_ {
        self.units.iter().flatten().chain(&self.gates).copied()
    }
}

/// Draws unit masks ~ Bernoulli(keep) and block gates ~ Bernoulli(survival).
pub fn sample_mask(spec: &ModelSpec, rng: &mut RngStream) -> NoiseMask {
    let units = spec
        .hidden
        .iter()
        .zip(&spec.keep)
        .map(|(&w, &keep)| (0..w).map(|_| rng.bernoulli(keep)).collect())
        .collect();
    let gates = spec.survival.iter().map(|&s| rng.bernoulli(s)).collect();
    NoiseMask { units, gates }
}

/// Tape handles for a registered [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub hidden: Vec<(Var, Var)>,
    pub blocks: Vec<[Var; 4]>,
    pub head: (Var, Var),
}

impl ParamVars {
    /// Regroups handles given in [`ParameterSet::tensors`] order.
    pub fn from_ordered(vars: &[Var], hidden: usize, blocks: usize) -> Result<Self> {
        if vars.len() != 2 * hidden + 4 * blocks + 2 {
            return Err(invalid(format!(
                "{} handles for {hidden} hidden layers and {blocks} blocks",
                vars.len()
            )));
        }
        let (h, rest) = vars.split_at(2 * hidden);
        let (b, head) = rest.split_at(4 * blocks);
        Ok(Self {
            hidden: h.chunks_exact(2).map(|p| (p[0], p[1])).collect(),
            blocks: b.chunks_exact(4).map(|p| [p[0], p[1], p[2], p[3]]).collect(),
            head: (head[0], head[1]),
        })
    }

    /// Handles in the same order as [`ParameterSet::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for &(w, b) in &self.hidden {
            v.extend([w, b]);
        }
        for blk in &self.blocks {
            v.extend(blk);
        }
        v.extend([self.head.0, self.head.1]);
        v
    }

    pub fn weights(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.hidden.iter().map(|p| p.0).collect();
        for blk in &self.blocks {
            v.extend([blk[0], blk[2]]);
        }
        v.push(self.head.0);
        v
    }
}

/// Records the parameters as leaves; `trainable` controls whether they collect gradients.
pub fn register(tape: &mut Tape, params: &ParameterSet, trainable: bool) -> ParamVars {
    let mut leaf = |t: &Tensor| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let hidden = params
        .hidden
        .iter()
        .map(|l| (leaf(&l.weight), leaf(&l.bias)))
        .collect();
    let blocks = params
        .blocks
        .iter()
        .map(|b| {
            [
                leaf(&b.inner.weight),
                leaf(&b.inner.bias),
                leaf(&b.outer.weight),
                leaf(&b.outer.bias),
            ]
        })
        .collect();
    let head = (leaf(&params.head.weight), leaf(&params.head.bias));
    ParamVars {
        hidden,
        blocks,
        head,
    }
}

/// How noise sites behave in a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Noise<'a> {
    /// Test-time pass: dropout is the identity, gates take their expectation.
    Expected,
    /// One mask per input row, or a single mask shared by all rows.
    Masks(&'a [NoiseMask]),
}

fn pick(masks: &[NoiseMask], row: usize) -> &NoiseMask {
    if masks.len() == 1 {
        &masks[0]
    } else {
        &masks[row]
    }
}

/// Builds the logits graph for `x` (`[n × input_dim]`).
pub fn logits_graph(
    tape: &mut Tape,
    spec: &ModelSpec,
    vars: &ParamVars,
    x: Var,
    noise: Noise<'_>,
) -> Result<Var> {
    let xt = tape.value(x);
    if xt.shape().len() != 2 || xt.cols() != spec.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: xt.shape().to_vec(),
            rhs: vec![spec.input_dim],
        });
    }
    let rows = xt.rows();
    if let Noise::Masks(masks) = noise {
        if !(masks.len() == 1 || masks.len() == rows) {
            return Err(invalid(format!("{} masks for {rows} rows", masks.len())));
        }
        if !masks.iter().all(|m| m.matches(spec)) {
            return Err(invalid("noise mask does not match the model spec"));
        }
    }

    let mut h = x;
    for (site, &(w, b)) in vars.hidden.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        let z = tape.add_row(z, b)?;
        h = tape.relu(z)?;
        if let Noise::Masks(masks) = noise {
            let width = spec.hidden[site];
            let inv_keep = 1.0 / spec.keep[site];
            let mut scale = Vec::with_capacity(rows * width);
            for r in 0..rows {
                let unit = &pick(masks, r).units[site];
                scale.extend(unit.iter().map(|&on| if on { inv_keep } else { 0.0 }));
            }
            let s = tape.constant(Tensor::matrix(rows, width, scale)?);
            h = tape.mul(h, s)?;
        }
    }

    let width = spec.block_width();
    for (i, blk) in vars.blocks.iter().enumerate() {
        let z = tape.matmul(h, blk[0])?;
        let z = tape.add_row(z, blk[1])?;
        let z = tape.relu(z)?;
        let z = tape.matmul(z, blk[2])?;
        let f = tape.add_row(z, blk[3])?;
        let gated = match noise {
            Noise::Expected => tape.scale(f, spec.survival[i])?,
            Noise::Masks(masks) => {
                let mut g = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    let on = if pick(masks, r).gates[i] { 1.0 } else { 0.0 };
                    g.extend(std::iter::repeat_n(on, width));
                }
                let g = tape.constant(Tensor::matrix(rows, width, g)?);
                tape.mul(f, g)?
            }
        };
        h = tape.add(h, gated)?;
    }

    let z = tape.matmul(h, vars.head.0)?;
    tape.add_row(z, vars.head.1)
}

fn run(spec: &ModelSpec, x: &Tensor, params: &ParameterSet, noise: Noise<'_>, probs: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let mut out = logits_graph(&mut tape, spec, &vars, xv, noise)?;
    if probs {
        out = tape.softmax(out)?;
    }
    Ok(tape.value(out).clone())
}

/// Class probabilities under the given noise masks (training-time semantics).
pub fn forward_stochastic(spec: &ModelSpec, x: &Tensor, params: &ParameterSet, masks: &[NoiseMask]) -> Result<Tensor> {
    run(spec, x, params, Noise::Masks(masks), true)
}

/// Class probabilities with noise replaced by its expectation.
pub fn forward_deterministic(spec: &ModelSpec, x: &Tensor, params: &ParameterSet) -> Result<Tensor> {
    run(spec, x, params, Noise::Expected, true)
}

pub fn logits_stochastic(spec: &ModelSpec, x: &Tensor, params: &ParameterSet, masks: &[NoiseMask]) -> Result<Tensor> {
    run(spec, x, params, Noise::Masks(masks), false)
}

pub fn logits_deterministic(spec: &ModelSpec, x: &Tensor, params: &ParameterSet) -> Result<Tensor> {
    run(spec, x, params, Noise::Expected, false)
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    /// IEEE-754 bit patterns as 16 hex digits.
    data: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    spec: ModelSpec,
    params: Vec<NamedArray>,
}

pub fn checkpoint_to_json(spec: &ModelSpec, params: &ParameterSet) -> Result<String> {
    let arrays = params
        .names()
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| NamedArray {
            name,
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect(),
        })
        .collect();
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        spec: spec.clone(),
        params: arrays,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn checkpoint_from_json(text: &str) -> Result<(ModelSpec, ParameterSet)> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(invalid(format!(
            "unsupported checkpoint format_version {}",
            file.format_version
        )));
    }
    let spec = file.spec;
    let mut params = init_params(&spec, &mut RngStream::new(0, 0))?;
    let names = params.names();
    if names.len() != file.params.len() {
        return Err(invalid("checkpoint parameter count does not match its spec"));
    }
    for ((slot, name), array) in params.tensors_mut().into_iter().zip(&names).zip(file.params) {
        if &array.name != name || array.shape != slot.shape() {
            return Err(invalid(format!("unexpected checkpoint entry {}", array.name)));
        }
        let data = array
            .data
            .iter()
            .map(|h| {
                u64::from_str_radix(h, 16)
                    .map(f64::from_bits)
                    .map_err(|e| invalid(format!("bad hex float {h:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        *slot = Tensor::new(array.shape, data)?;
    }
    Ok((spec, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, spec: &ModelSpec, params: &ParameterSet) -> Result<()> {
    fs::write(path, checkpoint_to_json(spec, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelSpec, ParameterSet)> {
    checkpoint_from_json(&fs::read_to_string(path)?)
}
