use calibforge_core::loss::{
    alpha_graph, ci_loss, cross_entropy, entropy_ci_loss, l2_penalty, vwci_loss, Alphas,
};
use calibforge_core::math::{check_gradients, RngStream, Tape, Tensor, Var};
use calibforge_core::model::{init_params, logits_graph, sample_mask, ModelSpec, Noise, ParamVars};
use calibforge_core::stochastic::{normalized_variance, AlphaMode, StochasticPredictionSet};
use calibforge_core::Result;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = RngStream::new(seed, 0);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

fn check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let r = check_gradients(inputs, H, FLOOR, build).unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn elementwise_primitives() {
    let a = random(3, 4, 1, -2.0, 2.0);
    let b = random(3, 4, 2, -2.0, 2.0);
    let pos = random(3, 4, 3, 0.2, 3.0);
    check(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        let m = t.mul(m, v[0])?;
        t.sum(m)
    });
    check(std::slice::from_ref(&a), |t, v| {
        let r = t.relu(v[0])?;
        let sq = t.mul(r, r)?;
        let e = t.exp(v[0])?;
        let s = t.add(sq, e)?;
        let s = t.scale(s, 0.7)?;
        t.mean(s)
    });
    check(&[pos], |t, v| {
        let l = t.log(v[0])?;
        let r = t.sqrt(v[0])?;
        let p = t.mul(l, r)?;
        t.sum(p)
    });
}

#[test]
fn matrix_and_row_primitives() {
    let a = random(3, 4, 4, -1.0, 1.0);
    let w = random(4, 5, 5, -1.0, 1.0);
    let bias = random(1, 5, 6, -1.0, 1.0);
    check(&[a, w, bias], |t, v| {
        let z = t.matmul(v[0], v[1])?;
        let z = t.add_row(z, v[2])?;
        let sq = t.mul(z, z)?;
        let rs = t.row_sum(sq)?;
        let rm = t.row_mean(z)?;
        let p = t.mul(rs, rm)?;
        t.sum(p)
    });
}

#[test]
fn softmax_gather_and_grouping() {
    let z = random(6, 4, 7, -2.0, 2.0);
    let labels = [0usize, 3, 1];
    check(std::slice::from_ref(&z), |t, v| {
        let p = t.softmax(v[0])?;
        let g = t.group_mean(p, 2)?;
        let r = t.repeat_rows(g, 2)?;
        let m = t.mul(r, p)?;
        let s = t.row_sum(m)?;
        let s = t.group_mean(s, 2)?;
        let picked = t.gather(g, &labels)?;
        let both = t.mul(s, picked)?;
        t.sum(both)
    });
    check(&[z], |t, v| {
        let p = t.softmax(v[0])?;
        let a = alpha_graph(t, p, 3, AlphaMode::OneMinusBc)?;
        t.sum(a)
    });
}

#[test]
fn losses_on_probabilities() {
    let z = random(6, 4, 8, -2.0, 2.0);
    let labels = [2usize, 0, 1, 3, 3, 1];
    check(std::slice::from_ref(&z), |t, v| {
        let p = t.softmax(v[0])?;
        cross_entropy(t, p, &labels)
    });
    check(std::slice::from_ref(&z), |t, v| {
        let p = t.softmax(v[0])?;
        ci_loss(t, p, &labels, 0.3)
    });
    check(std::slice::from_ref(&z), |t, v| {
        let p = t.softmax(v[0])?;
        entropy_ci_loss(t, p, &labels, 0.5)
    });
    check(std::slice::from_ref(&z), |t, v| {
        let p = t.softmax(v[0])?;
        vwci_loss(t, p, &labels[..2], 3, Alphas::Fixed(&[0.2, 0.7]), true)
    });
    check(std::slice::from_ref(&z), |t, v| {
        let p = t.softmax(v[0])?;
        vwci_loss(t, p, &labels[..3], 2, Alphas::Differentiable(AlphaMode::OneMinusBc), true)
    });
    check(std::slice::from_ref(&z), |t, v| {
        let p = t.softmax(v[0])?;
        vwci_loss(t, p, &labels[..2], 3, Alphas::Differentiable(AlphaMode::Bc), true)
    });
    // First-pass-only gradients change the gradient, never the value.
    let value = |all: bool| {
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let p = t.softmax(zv).unwrap();
        let l = vwci_loss(&mut t, p, &labels[..2], 3, Alphas::Fixed(&[0.4, 0.1]), all).unwrap();
        t.value(l).item()
    };
    assert_eq!(value(true).to_bits(), value(false).to_bits());
    let w = random(3, 3, 9, -1.0, 1.0);
    check(&[w], |t, v| l2_penalty(t, &[v[0]], 0.01));
}

/// Every loss kind through a dropout network with fixed masks.
#[test]
fn network_losses() {
    let spec = ModelSpec::mlp(2, &[16, 8], 4).with_dropout(0.7);
    let params = init_params(&spec, &mut RngStream::new(3, 1)).unwrap();
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let n = 5;
    let t_samples = 3;
    let x = random(n, 2, 10, -2.0, 2.0);
    let labels = [0usize, 1, 2, 3, 1];
    let mut rng = RngStream::new(4, 2);
    let rows: Vec<f64> = (0..n).flat_map(|i| x.row(i).repeat(t_samples)).collect();
    let xt = Tensor::matrix(n * t_samples, 2, rows).unwrap();
    let masks: Vec<_> = (0..n * t_samples).map(|_| sample_mask(&spec, &mut rng)).collect();

    let probs = |t: &mut Tape, v: &[Var], input: &Tensor, m: &[_]| -> Result<Var> {
        let vars = ParamVars::from_ordered(v, 2, 0)?;
        let xv = t.constant(input.clone());
        let z = logits_graph(t, &spec, &vars, xv, Noise::Masks(m))?;
        t.softmax(z)
    };
    let single = &masks[..n];

    check(&tensors, |t, v| {
        let p = probs(t, v, &x, single)?;
        let l = cross_entropy(t, p, &labels)?;
        let pen = l2_penalty(t, &ParamVars::from_ordered(v, 2, 0)?.weights(), 5e-4)?;
        t.add(l, pen)
    });
    check(&tensors, |t, v| {
        let p = probs(t, v, &x, single)?;
        ci_loss(t, p, &labels, 0.1)
    });
    check(&tensors, |t, v| {
        let p = probs(t, v, &x, single)?;
        entropy_ci_loss(t, p, &labels, 0.5)
    });

    // Detached normalized variance, measured once at the evaluation point.
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|x| tape.constant(x.clone())).collect();
    let p = probs(&mut tape, &vars, &xt, &masks).unwrap();
    let alphas: Vec<f64> = tape
        .value(p)
        .data()
        .chunks_exact(t_samples * 4)
        .map(|s| normalized_variance(&StochasticPredictionSet::new(t_samples, 4, s.to_vec()).unwrap(), AlphaMode::OneMinusBc))
        .collect();
    assert!(alphas.iter().any(|&a| a > 1e-3));
    check(&tensors, |t, v| {
        let p = probs(t, v, &xt, &masks)?;
        vwci_loss(t, p, &labels, t_samples, Alphas::Fixed(&alphas), true)
    });
    check(&tensors, |t, v| {
        let p = probs(t, v, &xt, &masks)?;
        vwci_loss(t, p, &labels, t_samples, Alphas::Differentiable(AlphaMode::OneMinusBc), true)
    });
}

#[test]
fn residual_network_gradients() {
    let spec = ModelSpec::mlp(3, &[6], 3).with_residual(2, 0.5);
    let params = init_params(&spec, &mut RngStream::new(5, 1)).unwrap();
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let x = random(4, 3, 11, -1.0, 1.0);
    let mut rng = RngStream::new(6, 0);
    let masks: Vec<_> = (0..4).map(|_| sample_mask(&spec, &mut rng)).collect();
    for noise in [Noise::Masks(&masks), Noise::Expected] {
        check(&tensors, |t, v| {
            let vars = ParamVars::from_ordered(v, 1, 2)?;
            let xv = t.constant(x.clone());
            let z = logits_graph(t, &spec, &vars, xv, noise)?;
            let p = t.softmax(z)?;
            cross_entropy(t, p, &[0, 1, 2, 1])
        });
    }
}
