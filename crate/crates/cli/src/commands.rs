use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use calibforge_core::calib::{
    apply_temperature, fit_temperature, records_from_probs, temperature_nll, variance_histogram, BinKey,
    VarianceBinning,
};
use calibforge_core::data::save_csv;
use calibforge_core::loss::LossKind;
use calibforge_core::model::{load_checkpoint, save_checkpoint};
use calibforge_core::stochastic::{AlphaMode, StochasticConfig};
use calibforge_core::Result;

use crate::args::{AblateArgs, EvalArgs, GenDataArgs, TempArgs, TrainArgs};
use crate::config::{config_error, read_text, RunConfig, CONFIG_FORMAT_VERSION};
use crate::pipeline::{
    logits, logits_csv, median, parse_logits_csv, predict, predictions_csv, report, score, train_run, write_json,
    Metrics,
};

fn parse_flag<T: std::str::FromStr>(flag: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_error(format!("{flag}: unrecognized value {value:?}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::resolve(&args.data, &args.model, &args.optim, LossKind::Baseline, args.seed, &args.out)?;
    create_dir(&args.out)?;
    write_json(args.out.join("config.json"), &cfg)?;
    let data = cfg.prepare()?;
    let (params, log) = train_run(&cfg, &data, args.checkpoint_every, Some(&args.out))?;
    save_checkpoint(args.out.join("model.json"), &cfg.model, &params)?;
    log.write_csv(args.out.join("trainlog.csv"))?;
    let last = log.entries.last();
    eprintln!(
        "trained {} epochs: loss {:.4}, train accuracy {:.4}",
        log.entries.len(),
        last.map_or(f64::NAN, |e| e.loss),
        last.map_or(f64::NAN, |e| e.acc)
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalConfig {
    format_version: u32,
    run: PathBuf,
    model: PathBuf,
    data: Option<PathBuf>,
    split: String,
    bins: usize,
    bin_key: BinKey,
    stochastic: Option<StochasticConfig>,
    alpha_mode: AlphaMode,
    variance_bins: usize,
    variance_binning: VarianceBinning,
}

fn load_model(run: &Path, model: Option<&Path>) -> Result<(PathBuf, calibforge_core::model::ModelSpec, calibforge_core::model::ParameterSet)> {
    let path = model.map_or_else(|| run.join("model.json"), Path::to_path_buf);
    if !path.is_file() {
        return Err(config_error(format!("checkpoint {} not found", path.display())));
    }
    let (spec, params) = load_checkpoint(&path)?;
    Ok((path, spec, params))
}

fn load_run(run: &Path) -> Result<RunConfig> {
    let path = run.join("config.json");
    if !path.is_file() {
        return Err(config_error(format!("{} not found; pass a directory written by train", path.display())));
    }
    RunConfig::load(path)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_run(&args.run)?;
    let (model_path, spec, params) = load_model(&args.run, args.model.as_deref())?;
    let key: BinKey = parse_flag("--bin-key", &args.bin_key)?;
    let mode: AlphaMode = parse_flag("--alpha-mode", &args.alpha_mode)?;
    let binning: VarianceBinning = parse_flag("--variance-binning", &args.variance_binning)?;
    if args.bins == 0 || args.variance_bins == 0 {
        return Err(config_error("--bins and --variance-bins must be positive"));
    }
    let prepared = cfg.prepare()?;
    let ds = match &args.data {
        Some(path) => {
            let raw = calibforge_core::data::load_csv(path)?;
            match &prepared.standardizer {
                Some(st) => st.apply(&raw)?,
                None => raw,
            }
        }
        None => prepared.get(&args.split)?.clone(),
    };
    let stochastic = match args.stochastic {
        Some(0) => return Err(config_error("--stochastic needs at least one sample")),
        Some(t) => Some(StochasticConfig {
            samples: t,
            seed: args.seed,
        }),
        None => None,
    };

    let out = args.out.clone().unwrap_or_else(|| args.run.join("eval"));
    create_dir(&out)?;
    write_json(
        out.join("config.json"),
        &EvalConfig {
            format_version: CONFIG_FORMAT_VERSION,
            run: args.run.clone(),
            model: model_path,
            data: args.data.clone(),
            split: args.split.clone(),
            bins: args.bins,
            bin_key: key,
            stochastic,
            alpha_mode: mode,
            variance_bins: args.variance_bins,
            variance_binning: binning,
        },
    )?;

    let preds = predict(&spec, &params, &ds, stochastic.map(|s| (s, mode)))?;
    let records = records_from_probs(&preds.probs, &ds.labels)?;
    let rep = report(&records, args.bins, key)?;
    write_json(out.join("report.json"), &rep)?;
    fs::write(out.join("predictions.csv"), predictions_csv(&records))?;

    let mut reliability = String::from("lo,hi,count,acc,conf\n");
    for b in &rep.bins {
        let _ = writeln!(reliability, "{:?},{:?},{},{:?},{:?}", b.lo, b.hi, b.count, b.acc, b.conf);
    }
    fs::write(out.join("reliability.csv"), reliability)?;
    let mut coverage = String::from("t,frac\n");
    for p in &rep.coverage {
        let _ = writeln!(coverage, "{:?},{:?}", p.t, p.frac);
    }
    fs::write(out.join("coverage.csv"), coverage)?;

    match &preds.alphas {
        None => fs::write(out.join("logits.csv"), logits_csv(&logits(&spec, &params, &ds)?, &ds.labels))?,
        Some(alphas) => {
            let mut text = String::from("id,alpha,correct,confidence\n");
            for (r, a) in records.iter().zip(alphas) {
                let _ = writeln!(text, "{},{a:?},{},{:?}", r.id, u8::from(r.correct()), r.confidence);
            }
            fs::write(out.join("alphas.csv"), text)?;
            let hist = variance_histogram(alphas, &records, args.variance_bins, binning)?;
            let mut text = String::from("lo,hi,count,accuracy,confidence,coverage\n");
            for b in &hist {
                let _ = writeln!(
                    text,
                    "{:?},{:?},{},{:?},{:?},{:?}",
                    b.lo, b.hi, b.count, b.accuracy, b.confidence, b.coverage
                );
            }
            fs::write(out.join("variance_hist.csv"), text)?;
        }
    }
    eprintln!(
        "n {}: accuracy {:.4}, ECE {:.4}, MCE {:.4}, NLL {:.4}, Brier {:.4}",
        rep.n, rep.accuracy, rep.ece, rep.mce, rep.nll, rep.brier
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureResult {
    pub format_version: u32,
    /// 1: calibrated on the training set; 2: on a separate holdout; 0: on a logit dump.
    pub case: u8,
    pub tau: f64,
    pub holdout_n: usize,
    pub holdout_nll_before: f64,
    pub holdout_nll_after: f64,
}

pub fn cmd_temp(args: &TempArgs) -> Result<()> {
    let key: BinKey = parse_flag("--bin-key", &args.bin_key)?;
    let (fit, eval, case, out) = match (&args.run, &args.logits) {
        (Some(run), _) => {
            let cfg = load_run(run)?;
            let (_, spec, params) = load_model(run, None)?;
            let data = cfg.prepare()?;
            let holdout = match args.case {
                1 => &data.train,
                2 => data
                    .holdout
                    .as_ref()
                    .ok_or_else(|| config_error("case 2 needs a non-empty holdout split; adjust --split at training"))?,
                other => return Err(config_error(format!("--case must be 1 or 2, got {other}"))),
            };
            let fit = (logits(&spec, &params, holdout)?, holdout.labels.clone());
            let eval = (logits(&spec, &params, &data.test)?, data.test.labels.clone());
            (fit, eval, args.case, args.out.clone().unwrap_or_else(|| run.join("temp")))
        }
        (None, Some(path)) => {
            let fit = parse_logits_csv(&read_text(path)?)?;
            let eval = match &args.eval_logits {
                Some(p) => parse_logits_csv(&read_text(p)?)?,
                None => fit.clone(),
            };
            let out = args.out.clone().ok_or_else(|| config_error("--out is required with --logits"))?;
            (fit, eval, 0, out)
        }
        (None, None) => return Err(config_error("pass --run or --logits")),
    };
    if fit.1.is_empty() {
        return Err(config_error("empty holdout"));
    }
    let tau = fit_temperature(&fit.0, &fit.1)?;
    let result = TemperatureResult {
        format_version: CONFIG_FORMAT_VERSION,
        case,
        tau: tau.value(),
        holdout_n: fit.1.len(),
        holdout_nll_before: temperature_nll(&fit.0, &fit.1, 1.0),
        holdout_nll_after: temperature_nll(&fit.0, &fit.1, tau.value()),
    };
    let before = records_from_probs(&apply_temperature(&eval.0, calibforge_core::calib::Temperature::new(1.0)?)?, &eval.1)?;
    let after = records_from_probs(&apply_temperature(&eval.0, tau)?, &eval.1)?;
    create_dir(&out)?;
    write_json(out.join("temperature.json"), &result)?;
    write_json(out.join("report_before.json"), &report(&before, args.bins, key)?)?;
    write_json(out.join("report_after.json"), &report(&after, args.bins, key)?)?;
    eprintln!(
        "tau {:.4}: holdout NLL {:.4} -> {:.4}",
        result.tau, result.holdout_nll_before, result.holdout_nll_after
    );
    Ok(())
}

/// Metrics of one (T, seed) ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub samples: usize,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Trains and scores every (T, seed) pair; runs execute in parallel but each
/// is individually deterministic, so results do not depend on scheduling.
pub fn run_ablation(base: &RunConfig, t_list: &[usize], seeds: u64, bins: usize, key: BinKey) -> Result<Vec<AblationRun>> {
    if t_list.is_empty() || seeds == 0 {
        return Err(config_error("--t-list and --seeds must be non-empty"));
    }
    if t_list.contains(&0) {
        return Err(config_error("--t-list entries must be positive"));
    }
    let jobs: Vec<(usize, u64)> = t_list
        .iter()
        .flat_map(|&t| (0..seeds).map(move |k| (t, base.seed + k)))
        .collect();
    jobs.par_iter()
        .map(|&(t, seed)| {
            let mut cfg = base.with_seed(seed);
            cfg.train.loss.samples = t;
            cfg.stochastic.samples = t;
            let data = cfg.prepare()?;
            let (params, _) = train_run(&cfg, &data, None, None)?;
            let rep = score(&cfg.model, &params, &data.test, bins, key)?;
            Ok(AblationRun {
                samples: t,
                seed,
                metrics: Metrics::from(&rep),
            })
        })
        .collect()
}

/// Median of each metric per T, in `t_list` order.
pub fn summarize_ablation(runs: &[AblationRun], t_list: &[usize]) -> Vec<(usize, Metrics)> {
    t_list
        .iter()
        .map(|&t| {
            let ms: Vec<Metrics> = runs.iter().filter(|r| r.samples == t).map(|r| r.metrics).collect();
            let med = |f: fn(&Metrics) -> f64| median(&ms.iter().map(f).collect::<Vec<_>>());
            (
                t,
                Metrics {
                    ece: med(|m| m.ece),
                    mce: med(|m| m.mce),
                    nll: med(|m| m.nll),
                    brier: med(|m| m.brier),
                    acc: med(|m| m.acc),
                },
            )
        })
        .collect()
}

pub fn cmd_ablate_t(args: &AblateArgs) -> Result<()> {
    let key: BinKey = parse_flag("--bin-key", &args.bin_key)?;
    let base = RunConfig::resolve(&args.data, &args.model, &args.optim, LossKind::Vwci, args.seed, &args.out)?;
    create_dir(&args.out)?;
    write_json(args.out.join("config.json"), &AblationConfig {
        format_version: CONFIG_FORMAT_VERSION,
        base: base.clone(),
        t_list: args.t_list.clone(),
        seeds: args.seeds,
        bins: args.bins,
        bin_key: key,
    })?;
    let runs = run_ablation(&base, &args.t_list, args.seeds, args.bins, key)?;
    let mut per_run = String::from("T,seed,ece,mce,nll,brier,acc\n");
    for r in &runs {
        let m = r.metrics;
        let _ = writeln!(per_run, "{},{},{:?},{:?},{:?},{:?},{:?}", r.samples, r.seed, m.ece, m.mce, m.nll, m.brier, m.acc);
    }
    fs::write(args.out.join("ablation_runs.csv"), per_run)?;
    let mut table = String::from("T,ece,mce,nll,brier,acc\n");
    for (t, m) in summarize_ablation(&runs, &args.t_list) {
        let _ = writeln!(table, "{t},{:?},{:?},{:?},{:?},{:?}", m.ece, m.mce, m.nll, m.brier, m.acc);
        eprintln!("T={t}: ECE {:.4}, accuracy {:.4}", m.ece, m.acc);
    }
    fs::write(args.out.join("ablation.csv"), table)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct AblationConfig {
    format_version: u32,
    base: RunConfig,
    t_list: Vec<usize>,
    seeds: u64,
    bins: usize,
    bin_key: BinKey,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    if args.data.data != "blobs" {
        return Err(config_error("gen-data only generates --data blobs"));
    }
    let source = crate::config::data_source(&args.data);
    let cfg = RunConfig {
        format_version: CONFIG_FORMAT_VERSION,
        seed: args.seed,
        data: source,
        split: Default::default(),
        standardize: false,
        model: calibforge_core::model::ModelSpec::mlp(args.data.dim, &[1], args.data.classes),
        train: Default::default(),
        stochastic: Default::default(),
        out: args.out.clone(),
    };
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_csv(&args.out, &cfg.dataset()?)
}
