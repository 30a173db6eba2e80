use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use calibforge_core::data::{
    gen_blobs, inject_label_noise, load_csv, split, BlobSpec, Dataset, SplitSpec, Splits, Standardizer,
};
use calibforge_core::loss::{LossConfig, LossKind};
use calibforge_core::model::ModelSpec;
use calibforge_core::stochastic::StochasticConfig;
use calibforge_core::trainer::TrainConfig;
use calibforge_core::{Error, Result};

use crate::args::{DataArgs, ModelArgs, OptimArgs};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Blobs { spec: BlobSpec, label_noise: f64 },
    Csv { path: PathBuf, label_noise: f64 },
}

/// Everything needed to replay a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub data: DataSource,
    pub split: SplitSpec,
    pub standardize: bool,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub stochastic: StochasticConfig,
    pub out: PathBuf,
}

/// The splits of a run after optional standardization.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub holdout: Option<Dataset>,
    pub test: Dataset,
    pub standardizer: Option<Standardizer>,
}

impl PreparedData {
    pub fn get(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            "holdout" => self
                .holdout
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("the run has an empty holdout split".into())),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}; use train, holdout or test"))),
        }
    }
}

pub(crate) fn config_error(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Reads a whole text file, naming the path on failure.
pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))
}

pub fn split_spec(fractions: &[f64], seed: u64) -> Result<SplitSpec> {
    let [a, b, c] = fractions else {
        return Err(config_error("--split takes three comma-separated values"));
    };
    let total = a + b + c;
    if !(total > 0.0 && total.is_finite()) || fractions.iter().any(|v| *v < 0.0) {
        return Err(config_error("--split values must be non-negative with a positive sum"));
    }
    let mut spec = SplitSpec {
        train: a / total,
        holdout: b / total,
        test: c / total,
        seed,
    };
    // Absorb rounding so the fractions sum to one.
    spec.test = 1.0 - spec.train - spec.holdout;
    spec.validate().map_err(|e| config_error(format!("--split: {e}")))?;
    Ok(spec)
}

pub fn data_source(args: &DataArgs) -> DataSource {
    if args.data == "blobs" {
        DataSource::Blobs {
            spec: BlobSpec {
                classes: args.classes,
                per_class: args.per_class,
                dim: args.dim,
                spread: args.spread,
                sigma: args.sigma,
            },
            label_noise: args.label_noise,
        }
    } else {
        DataSource::Csv {
            path: PathBuf::from(&args.data),
            label_noise: args.label_noise,
        }
    }
}

pub fn loss_config(args: &OptimArgs, default_kind: LossKind) -> Result<LossConfig> {
    let kind: LossKind = match &args.loss {
        Some(s) => s.parse().map_err(|_| config_error(format!("--loss: unknown loss {s:?}")))?,
        None => default_kind,
    };
    let beta = match (kind, args.beta) {
        (LossKind::Ci, None) => return Err(config_error("--beta is required with --loss ci")),
        (_, b) => b.unwrap_or(0.0),
    };
    let gamma = match (kind, args.gamma) {
        (LossKind::EntropyCi, None) => return Err(config_error("--gamma is required with --loss entropy-ci")),
        (_, g) => g.unwrap_or(0.0),
    };
    let cfg = LossConfig {
        kind,
        beta,
        gamma,
        weight_decay: args.weight_decay,
        samples: args.samples,
        alpha_mode: args
            .alpha_mode
            .parse()
            .map_err(|_| config_error(format!("--alpha-mode: unknown mode {:?}", args.alpha_mode)))?,
        forced_alpha: args.forced_alpha,
        alpha_gradient: args.alpha_gradient,
        grad_all_samples: !args.first_sample_grad,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_spec(args: &ModelArgs, input_dim: usize, classes: usize) -> Result<ModelSpec> {
    if args.hidden.is_empty() {
        return Err(config_error("--hidden needs at least one layer width"));
    }
    let mut spec = ModelSpec::mlp(input_dim, &args.hidden, classes).with_dropout(args.keep);
    if args.residual_blocks > 0 {
        spec = spec.with_residual(args.residual_blocks, args.survival);
    }
    spec.validate()?;
    Ok(spec)
}

pub fn train_config(args: &OptimArgs, loss: LossConfig, seed: u64) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        momentum: args.momentum,
        decay: args.decay,
        milestones: args.milestones.clone(),
        loss,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Reads the data source to learn its input width and class count.
pub fn dataset_shape(source: &DataSource) -> Result<(usize, usize)> {
    match source {
        DataSource::Blobs { spec, .. } => Ok((spec.dim, spec.classes)),
        DataSource::Csv { path, .. } => {
            let ds = load_csv(path)?;
            Ok((ds.dim(), ds.classes))
        }
    }
}

impl RunConfig {
    pub fn resolve(
        data: &DataArgs,
        model: &ModelArgs,
        optim: &OptimArgs,
        default_kind: LossKind,
        seed: u64,
        out: &Path,
    ) -> Result<Self> {
        let source = data_source(data);
        let loss = loss_config(optim, default_kind)?;
        let train = train_config(optim, loss, seed)?;
        let split = split_spec(&data.split, seed)?;
        let (dim, classes) = dataset_shape(&source)?;
        let cfg = Self {
            format_version: CONFIG_FORMAT_VERSION,
            seed,
            data: source,
            split,
            standardize: data.standardize,
            model: model_spec(model, dim, classes)?,
            stochastic: StochasticConfig {
                samples: train.loss.samples,
                seed,
            },
            train,
            out: out.to_path_buf(),
        };
        Ok(cfg)
    }

    /// Same configuration with every seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.split.seed = seed;
        c.train.seed = seed;
        c.stochastic.seed = seed;
        c
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&read_text(path.as_ref())?)?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            return Err(config_error(format!("unsupported config format_version {}", cfg.format_version)));
        }
        Ok(cfg)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let (ds, rate) = match &self.data {
            DataSource::Blobs { spec, label_noise } => (gen_blobs(spec, self.seed)?, *label_noise),
            DataSource::Csv { path, label_noise } => (load_csv(path)?, *label_noise),
        };
        if rate > 0.0 {
            inject_label_noise(&ds, rate, self.seed)
        } else {
            Ok(ds)
        }
    }

    pub fn prepare(&self) -> Result<PreparedData> {
        let Splits { train, holdout, test } = split(&self.dataset()?, &self.split)?;
        if !self.standardize {
            return Ok(PreparedData {
                train,
                holdout,
                test,
                standardizer: None,
            });
        }
        let st = Standardizer::fit(&train);
        Ok(PreparedData {
            train: st.apply(&train)?,
            holdout: holdout.map(|h| st.apply(&h)).transpose()?,
            test: st.apply(&test)?,
            standardizer: Some(st),
        })
    }
}
