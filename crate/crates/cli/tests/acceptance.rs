//! End-to-end acceptance checks. Runs every criterion, prints one line per
//! criterion and exits non-zero if any fails.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rayon::prelude::*;

use calibforge::args::{Cli, Command};
use calibforge::config::RunConfig;
use calibforge::pipeline::{median, score, train_run};
use calibforge_core::calib::{
    apply_temperature, bin_predictions, ece, fit_temperature, mce, records_from_probs, spearman, temperature_nll,
    variance_histogram, BinKey, PredictionRecord, StreamingCalibration, Temperature, VarianceBinning,
};
use calibforge_core::loss::{
    approx_kl_mixture, ci_loss, cross_entropy, entropy_ci_loss, vwci_loss, Alphas, LossKind, MixturePriorSpec,
};
use calibforge_core::math::{check_gradients, softmax_row, RngStream, Tape, Tensor, Var};
use calibforge_core::model::{
    forward_deterministic, forward_stochastic, init_params, logits_graph, sample_mask, ModelSpec, Noise, NoiseMask,
    ParamVars, ParameterSet,
};
use calibforge_core::stochastic::{
    bhattacharyya, mc_predict, normalized_variance, predictive_covariance, predictive_mean, AlphaMode,
    StochasticConfig, StochasticPredictionSet,
};
use calibforge_core::Result;

/// Flags shared by the calibration experiments (criteria 4, 5 and 8).
const SETUP: &[&str] = &[
    "--data", "blobs", "--classes", "4", "--dim", "2", "--per-class", "1500", "--spread", "10", "--sigma", "1",
    "--label-noise", "0.2", "--split", "2,0,1", "--hidden", "64,64", "--keep", "0.5", "--samples", "5",
    "--epochs", "100",
];
const SEEDS: u64 = 5;
const BINS: usize = 20;

type LossFn<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn random_tensor(rows: usize, cols: usize, rng: &mut RngStream, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

fn random_distribution(classes: usize, rng: &mut RngStream) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes).map(|_| -rng.uniform().max(1e-300).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let spec = ModelSpec::mlp(2, &[16, 8], 4).with_dropout(0.8);
    let params = init_params(&spec, &mut RngStream::new(1, 0)).unwrap();
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let mut rng = RngStream::new(2, 0);
    let (n, t) = (6, 3);
    let x = random_tensor(n, 2, &mut rng, -2.0, 2.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
    let xt = Tensor::matrix(n * t, 2, (0..n).flat_map(|i| x.row(i).repeat(t)).collect()).unwrap();
    let masks: Vec<NoiseMask> = (0..n * t).map(|_| sample_mask(&spec, &mut rng)).collect();

    let probs = |tape: &mut Tape, v: &[Var], input: &Tensor, m: &[NoiseMask]| -> Result<Var> {
        let vars = ParamVars::from_ordered(v, 2, 0)?;
        let xv = tape.constant(input.clone());
        let z = logits_graph(tape, &spec, &vars, xv, Noise::Masks(m))?;
        tape.softmax(z)
    };
    let alphas: Vec<f64> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|p| tape.constant(p.clone())).collect();
        let p = probs(&mut tape, &vars, &xt, &masks).unwrap();
        tape.value(p)
            .data()
            .chunks_exact(t * 4)
            .map(|s| normalized_variance(&StochasticPredictionSet::new(t, 4, s.to_vec()).unwrap(), AlphaMode::OneMinusBc))
            .collect()
    };

    let single = &masks[..n];
    let mut worst = Vec::new();
    let cases: [(&str, LossFn); 4] = [
        ("baseline", Box::new(|tp: &mut Tape, v: &[Var]| {
            let p = probs(tp, v, &x, single)?;
            cross_entropy(tp, p, &labels)
        })),
        ("ci", Box::new(|tp: &mut Tape, v: &[Var]| {
            let p = probs(tp, v, &x, single)?;
            ci_loss(tp, p, &labels, 0.1)
        })),
        ("vwci", Box::new(|tp: &mut Tape, v: &[Var]| {
            let p = probs(tp, v, &xt, &masks)?;
            vwci_loss(tp, p, &labels, t, Alphas::Fixed(&alphas), true)
        })),
        ("entropy-ci", Box::new(|tp: &mut Tape, v: &[Var]| {
            let p = probs(tp, v, &x, single)?;
            entropy_ci_loss(tp, p, &labels, 0.5)
        })),
    ];
    for (name, build) in &cases {
        let r = check_gradients(&tensors, 1e-5, 1e-6, build).unwrap();
        worst.push((name.to_string(), r.max_rel_error));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(max < 1e-4 && secs < 10.0, format!("max rel error {} in {secs:.2}s", parts.join(", ")))
}

fn rec(id: usize, label: usize, scores: &[f64]) -> PredictionRecord {
    PredictionRecord::new(id, label, scores.to_vec()).unwrap()
}

fn metric_oracles() -> Verdict {
    let four = [
        rec(0, 0, &[0.95, 0.05]),
        rec(1, 1, &[0.95, 0.05]),
        rec(2, 0, &[0.55, 0.45]),
        rec(3, 0, &[0.55, 0.45]),
    ];
    let bins = bin_predictions(&four, 10, BinKey::Max).unwrap();
    let (e4, m4) = (ece(&bins, 4).unwrap(), mce(&bins));
    let hand = (e4 - 0.45).abs() < 1e-12 && (m4 - 0.45).abs() < 1e-12;

    let mut rng = RngStream::new(3, 0);
    let records: Vec<PredictionRecord> = (0..10_000)
        .map(|i| PredictionRecord::new(i, rng.below(6), random_distribution(6, &mut rng)).unwrap())
        .collect();
    let mut stream = StreamingCalibration::new(BINS, BinKey::Max).unwrap();
    records.iter().for_each(|r| stream.push(r));
    let batch = ece(&bin_predictions(&records, BINS, BinKey::Max).unwrap(), records.len()).unwrap();
    let bitwise = stream.ece().unwrap().to_bits() == batch.to_bits();

    let classes = 10;
    let calibrated: Vec<PredictionRecord> = (0..100_000)
        .map(|i| {
            let conf = rng.uniform_range(0.1 + 1e-6, 1.0);
            let pred = rng.below(classes);
            let rest = (1.0 - conf) / (classes - 1) as f64;
            let scores: Vec<f64> = (0..classes).map(|c| if c == pred { conf } else { rest }).collect();
            let label = if rng.bernoulli(conf) { pred } else { (pred + 1 + rng.below(classes - 1)) % classes };
            PredictionRecord::new(i, label, scores).unwrap()
        })
        .collect();
    let ec = ece(&bin_predictions(&calibrated, BINS, BinKey::Max).unwrap(), calibrated.len()).unwrap();
    verdict(
        hand && bitwise && ec < 0.02,
        format!("four-record ECE {e4} MCE {m4}; streaming == batch: {bitwise}; calibrated ECE {ec:.4}"),
    )
}

fn temperature_recovery() -> Verdict {
    let start = Instant::now();
    let (n, c, tau_true) = (50_000, 10, 2.5);
    let mut rng = RngStream::new(4, 0);
    let mut z = Vec::with_capacity(n * c);
    let mut labels = Vec::with_capacity(n);
    let mut p = vec![0.0; c];
    for _ in 0..n {
        let row: Vec<f64> = (0..c).map(|_| 2.0 * rng.normal()).collect();
        softmax_row(&row.iter().map(|v| v / tau_true).collect::<Vec<_>>(), &mut p);
        let u = rng.uniform();
        let mut acc = 0.0;
        labels.push(p.iter().position(|&q| { acc += q; u < acc }).unwrap_or(c - 1));
        z.extend(row);
    }
    let logits = Tensor::matrix(n, c, z).unwrap();
    let tau = fit_temperature(&logits, &labels).unwrap().value();
    let (before, after) = (temperature_nll(&logits, &labels, 1.0), temperature_nll(&logits, &labels, tau));
    let secs = start.elapsed().as_secs_f64();
    verdict(
        (2.4..=2.6).contains(&tau) && after <= before && secs < 30.0,
        format!("tau {tau:.4}; NLL {before:.4} -> {after:.4} in {secs:.2}s"),
    )
}

fn setup_config(loss: &str, seed: u64) -> RunConfig {
    let mut argv = vec!["calibforge", "train", "--out", "unused", "--loss", loss];
    argv.extend_from_slice(SETUP);
    let cli = <Cli as clap::Parser>::try_parse_from(argv).unwrap();
    let Command::Train(a) = cli.command else { unreachable!() };
    RunConfig::resolve(&a.data, &a.model, &a.optim, LossKind::Baseline, 0, "unused".as_ref())
        .unwrap()
        .with_seed(seed)
}

struct SeedRun {
    cfg: RunConfig,
    params: ParameterSet,
    ece: f64,
    acc: f64,
}

fn train_setup(loss: &str) -> Vec<SeedRun> {
    (0..SEEDS)
        .into_par_iter()
        .map(|seed| {
            let cfg = setup_config(loss, seed);
            let data = cfg.prepare().unwrap();
            let (params, _) = train_run(&cfg, &data, None, None).unwrap();
            let rep = score(&cfg.model, &params, &data.test, BINS, BinKey::Max).unwrap();
            SeedRun { cfg, params, ece: rep.ece, acc: rep.accuracy }
        })
        .collect()
}

fn directional_vwci(baseline: &[SeedRun], vwci: &[SeedRun], secs: f64) -> Verdict {
    let med = |runs: &[SeedRun], f: fn(&SeedRun) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    let (be, ve) = (med(baseline, |r| r.ece), med(vwci, |r| r.ece));
    let (ba, va) = (med(baseline, |r| r.acc), med(vwci, |r| r.acc));
    let per_seed: Vec<String> = baseline.iter().zip(vwci).map(|(b, v)| format!("{:.3}/{:.3}", b.ece, v.ece)).collect();
    verdict(
        ve <= 0.8 * be && va >= ba - 0.02 && secs < 300.0,
        format!(
            "median ECE baseline {be:.4} vwci {ve:.4} (ratio {:.2}); accuracy {ba:.4} vs {va:.4}; per seed {}; {secs:.0}s",
            ve / be,
            per_seed.join(" ")
        ),
    )
}

fn variance_reliability(baseline: &[SeedRun]) -> Verdict {
    let mut rhos = Vec::new();
    let mut gaps = Vec::new();
    for run in baseline {
        let data = run.cfg.prepare().unwrap();
        let cfg = StochasticConfig { samples: 5, seed: run.cfg.seed };
        let sets = mc_predict(&run.cfg.model, &data.test.features, &run.params, &cfg).unwrap();
        let alphas: Vec<f64> = sets.iter().map(|s| normalized_variance(s, AlphaMode::OneMinusBc)).collect();
        let mean: Vec<f64> = sets.iter().flat_map(predictive_mean).collect();
        let probs = Tensor::matrix(sets.len(), run.cfg.model.classes, mean).unwrap();
        let records = records_from_probs(&probs, &data.test.labels).unwrap();
        let correct: Vec<f64> = records.iter().map(|r| f64::from(u8::from(r.correct()))).collect();
        rhos.push(spearman(&alphas, &correct).unwrap());
        let hist = variance_histogram(&alphas, &records, 10, VarianceBinning::EqualCount).unwrap();
        gaps.push(hist[0].accuracy - hist[9].accuracy);
    }
    let (rho, gap) = (median(&rhos), median(&gaps));
    verdict(
        rho <= -0.1 && gap > 0.0,
        format!(
            "median Spearman {rho:.3} (per seed {}); lowest minus highest alpha decile accuracy {gap:.3}",
            rhos.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn reduction_identities() -> Verdict {
    let mut rng = RngStream::new(6, 0);
    let z = random_tensor(5, 4, &mut rng, -3.0, 3.0);
    let labels = [0usize, 3, 2, 1, 1];
    let value = |f: &dyn Fn(&mut Tape, Var) -> Result<Var>| {
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let p = t.softmax(zv).unwrap();
        let l = f(&mut t, p).unwrap();
        t.value(l).item().to_bits()
    };
    let ce = value(&|t, p| cross_entropy(t, p, &labels));
    let ci = value(&|t, p| ci_loss(t, p, &labels, 0.0)) == ce;
    let vw = value(&|t, p| vwci_loss(t, p, &labels, 1, Alphas::Fixed(&[0.0; 5]), true)) == ce;

    let spec = ModelSpec::mlp(4, &[8, 8], 3).with_residual(2, 1.0);
    let params = init_params(&spec, &mut rng).unwrap();
    let full = forward_stochastic(&spec, &z, &params, &[NoiseMask::full(&spec)]).unwrap();
    let det = forward_deterministic(&spec, &z, &params).unwrap();
    let fw = full.data().iter().zip(det.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let t1 = apply_temperature(&z, Temperature::new(1.0).unwrap()).unwrap();
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let sm = tape.softmax(zv).unwrap();
    let ts = t1.data().iter().zip(tape.value(sm).data()).all(|(a, b)| a.to_bits() == b.to_bits());
    verdict(
        ci && vw && fw && ts,
        format!("ci(beta=0)==ce {ci}; vwci(alpha=0,T=1)==ce {vw}; full mask==deterministic {fw}; tau=1==softmax {ts}"),
    )
}

fn stochastic_invariants() -> Verdict {
    let mut rng = RngStream::new(7, 0);
    let (mut alpha_ok, mut bc_ok, mut cov_ok, mut same_ok) = (true, true, true, true);
    for _ in 0..10_000 {
        let t = 1 + rng.below(10);
        let c = 2 + rng.below(8);
        let rows: Vec<Vec<f64>> = (0..t).map(|_| random_distribution(c, &mut rng)).collect();
        let set = StochasticPredictionSet::from_rows(&rows).unwrap();
        for mode in [AlphaMode::OneMinusBc, AlphaMode::Bc] {
            alpha_ok &= (0.0..=1.0).contains(&normalized_variance(&set, mode));
        }
        bc_ok &= (bhattacharyya(&rows[0], &rows[0]).unwrap() - 1.0).abs() <= 1e-12;
        let cov = predictive_covariance(&set);
        let mut trace = 0.0;
        for a in 0..c {
            trace += cov.data()[a * c + a];
            for b in 0..c {
                cov_ok &= (cov.data()[a * c + b] - cov.data()[b * c + a]).abs() <= 1e-12;
            }
        }
        cov_ok &= trace >= -1e-12;
        let same = StochasticPredictionSet::from_rows(&vec![rows[0].clone(); t]).unwrap();
        same_ok &= predictive_covariance(&same).data().iter().all(|&v| v == 0.0);
        same_ok &= normalized_variance(&same, AlphaMode::OneMinusBc).abs() <= 1e-12;
    }
    let kl = approx_kl_mixture(&MixturePriorSpec {
        squared_norms: [4.0, 0.0],
        weights: [1.0, 0.0],
        sigma: 1.0,
        dim: 2,
    })
    .unwrap();
    let kl_ok = (kl - 0.16212).abs() <= 1e-5;
    verdict(
        alpha_ok && bc_ok && cov_ok && same_ok && kl_ok,
        format!("alpha range {alpha_ok}; BC(p,p)=1 {bc_ok}; covariance {cov_ok}; identical rows {same_ok}; approx KL {kl:.6}"),
    )
}

fn t_ablation() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablation");
    let mut argv = vec!["calibforge", "ablate-t", "--out", out.to_str().unwrap(), "--t-list", "1,2,5,10,30", "--seeds", "5"];
    argv.extend_from_slice(SETUP);
    let start = Instant::now();
    let code = calibforge::run(argv);
    let secs = start.elapsed().as_secs_f64();
    if code != 0 {
        return verdict(false, format!("ablate-t exited with {code}"));
    }
    let text = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut lines = text.lines();
    let header_ok = lines.next() == Some("T,ece,mce,nll,brier,acc");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|f| f.parse().unwrap_or(f64::NAN)).collect()).collect();
    let well_formed = header_ok
        && rows.len() == 5
        && rows.iter().all(|r| r.len() == 6 && r.iter().all(|v| v.is_finite()))
        && rows.iter().map(|r| r[0]).collect::<Vec<_>>() == [1.0, 2.0, 5.0, 10.0, 30.0];
    if !well_formed {
        return verdict(false, format!("malformed ablation.csv:\n{text}"));
    }
    let ece_at = |t: f64| rows.iter().find(|r| r[0] == t).unwrap()[1];
    let table: Vec<String> = rows.iter().map(|r| format!("T={} {:.4}", r[0], r[1])).collect();
    verdict(
        ece_at(5.0) <= ece_at(1.0) && secs < 1200.0,
        format!("median ECE {}; {secs:.0}s", table.join(", ")),
    )
}

fn report(n: usize, name: &str, v: std::thread::Result<Verdict>) -> bool {
    let v = v.unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    let line = format!("criterion {n} {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    let mut out = std::io::stdout();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    v.pass
}

fn main() {
    let mut ok = true;
    ok &= report(1, "gradient correctness", catch_unwind(gradient_correctness));
    ok &= report(2, "metric oracles", catch_unwind(metric_oracles));
    ok &= report(3, "temperature recovery", catch_unwind(temperature_recovery));

    let start = Instant::now();
    let trained = catch_unwind(|| (train_setup("baseline"), train_setup("vwci")));
    let secs = start.elapsed().as_secs_f64();
    match trained {
        Ok((baseline, vwci)) => {
            ok &= report(4, "directional VWCI calibration", Ok(directional_vwci(&baseline, &vwci, secs)));
            ok &= report(5, "variance-reliability correlation", catch_unwind(AssertUnwindSafe(|| variance_reliability(&baseline))));
        }
        Err(e) => {
            ok &= report(4, "directional VWCI calibration", Err(e));
            ok &= report(5, "variance-reliability correlation", Ok(verdict(false, "training failed".into())));
        }
    }

    ok &= report(6, "reduction identities", catch_unwind(reduction_identities));
    ok &= report(7, "stochastic-inference invariants", catch_unwind(stochastic_invariants));
    ok &= report(8, "T-ablation harness", catch_unwind(t_ablation));
    if !ok {
        std::process::exit(1);
    }
}
