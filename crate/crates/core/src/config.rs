//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key may be overridden from
//! the command line; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::distgeo::InnerLoopConfig;
use crate::error::{Error, Result};
use crate::eval::{Bandwidth, MetricConfig, MmdConfig, PairFilter};
use crate::model::ModelConfig;
use crate::training::{TrainConfig, TrainingMode};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub resume: Option<PathBuf>,

    pub hidden: usize,
    pub layers: usize,
    pub z_dim: usize,
    pub flow_steps: usize,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub mode: TrainingMode,
    pub seed: u64,
    pub workers: usize,
    pub checkpoint_every: usize,

    pub inner_steps: usize,
    pub inner_learning_rate: f64,
    pub inner_init_scale: f64,
    pub inner_restarts: usize,

    pub solve_steps: usize,
    pub solve_learning_rate: f64,
    pub solve_restarts: usize,
    pub solve_early_stop: f64,

    pub delta: f64,
    pub heavy_only: bool,
    pub multiplier: usize,
    pub mmd_bandwidth: Bandwidth,
    pub pair_filter: PairFilter,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let solve = InnerLoopConfig::standalone();
        let metric = MetricConfig::default();
        Self {
            data: None,
            output_dir: PathBuf::from("runs/default"),
            resume: None,
            hidden: model.hidden,
            layers: model.layers,
            z_dim: model.z_dim,
            flow_steps: model.flow_steps,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            epochs: train.epochs,
            lambda: train.lambda,
            alpha: train.alpha,
            mode: train.mode,
            seed: train.seed,
            workers: train.workers,
            checkpoint_every: 10,
            inner_steps: train.inner.steps,
            inner_learning_rate: train.inner.learning_rate,
            inner_init_scale: train.inner.init_scale,
            inner_restarts: train.inner.restarts,
            solve_steps: solve.steps,
            solve_learning_rate: solve.learning_rate,
            solve_restarts: solve.restarts,
            solve_early_stop: solve.early_stop.unwrap_or(0.0),
            delta: metric.delta,
            heavy_only: metric.heavy_only,
            multiplier: metric.generated_multiplier,
            mmd_bandwidth: Bandwidth::MedianHeuristic,
            pair_filter: PairFilter::CarbonOxygen,
        }
    }
}

pub const KEYS: &[&str] = &[
    "data",
    "output_dir",
    "resume",
    "hidden",
    "layers",
    "z_dim",
    "flow_steps",
    "learning_rate",
    "batch_size",
    "epochs",
    "lambda",
    "alpha",
    "mode",
    "seed",
    "workers",
    "checkpoint_every",
    "inner_steps",
    "inner_learning_rate",
    "inner_init_scale",
    "inner_restarts",
    "solve_steps",
    "solve_learning_rate",
    "solve_restarts",
    "solve_early_stop",
    "delta",
    "heavy_only",
    "multiplier",
    "mmd_bandwidth",
    "pair_filter",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn bandwidth_text(b: Bandwidth) -> String {
    match b {
        Bandwidth::MedianHeuristic => "median".into(),
        Bandwidth::Fixed(s) => s.to_string(),
    }
}

fn filter_text(f: PairFilter) -> &'static str {
    match f {
        PairFilter::CarbonOxygen => "co",
        PairFilter::StrictCarbonOxygen => "strict_co",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data" => self.data = optional_path(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "resume" => self.resume = optional_path(v),
            "hidden" => self.hidden = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "z_dim" => self.z_dim = parse(key, v)?,
            "flow_steps" => self.flow_steps = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "inner_steps" => self.inner_steps = parse(key, v)?,
            "inner_learning_rate" => self.inner_learning_rate = parse(key, v)?,
            "inner_init_scale" => self.inner_init_scale = parse(key, v)?,
            "inner_restarts" => self.inner_restarts = parse(key, v)?,
            "solve_steps" => self.solve_steps = parse(key, v)?,
            "solve_learning_rate" => self.solve_learning_rate = parse(key, v)?,
            "solve_restarts" => self.solve_restarts = parse(key, v)?,
            "solve_early_stop" => self.solve_early_stop = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "heavy_only" => self.heavy_only = parse(key, v)?,
            "multiplier" => self.multiplier = parse(key, v)?,
            "mmd_bandwidth" => {
                self.mmd_bandwidth = if v == "median" {
                    Bandwidth::MedianHeuristic
                } else {
                    Bandwidth::Fixed(parse(key, v)?)
                }
            }
            "pair_filter" => {
                self.pair_filter = match v {
                    "co" => PairFilter::CarbonOxygen,
                    "strict_co" => PairFilter::StrictCarbonOxygen,
                    _ => return Err(Error::Config(format!("invalid value {v:?} for pair_filter"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        Ok(match key {
            "data" => path(&self.data),
            "output_dir" => self.output_dir.display().to_string(),
            "resume" => path(&self.resume),
            "hidden" => self.hidden.to_string(),
            "layers" => self.layers.to_string(),
            "z_dim" => self.z_dim.to_string(),
            "flow_steps" => self.flow_steps.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "lambda" => self.lambda.to_string(),
            "alpha" => self.alpha.to_string(),
            "mode" => self.mode.name().to_string(),
            "seed" => self.seed.to_string(),
            "workers" => self.workers.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "inner_steps" => self.inner_steps.to_string(),
            "inner_learning_rate" => self.inner_learning_rate.to_string(),
            "inner_init_scale" => self.inner_init_scale.to_string(),
            "inner_restarts" => self.inner_restarts.to_string(),
            "solve_steps" => self.solve_steps.to_string(),
            "solve_learning_rate" => self.solve_learning_rate.to_string(),
            "solve_restarts" => self.solve_restarts.to_string(),
            "solve_early_stop" => self.solve_early_stop.to_string(),
            "delta" => self.delta.to_string(),
            "heavy_only" => self.heavy_only.to_string(),
            "multiplier" => self.multiplier.to_string(),
            "mmd_bandwidth" => bandwidth_text(self.mmd_bandwidth),
            "pair_filter" => filter_text(self.pair_filter).to_string(),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        })
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", self.get(key).expect("listed keys are known")).expect("string write");
        }
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { hidden: self.hidden, layers: self.layers, z_dim: self.z_dim, flow_steps: self.flow_steps }
    }

    pub fn inner_config(&self) -> InnerLoopConfig {
        InnerLoopConfig {
            steps: self.inner_steps,
            learning_rate: self.inner_learning_rate,
            init_scale: self.inner_init_scale,
            restarts: self.inner_restarts,
            store_trajectory: true,
            early_stop: None,
        }
    }

    pub fn solve_config(&self) -> InnerLoopConfig {
        InnerLoopConfig {
            steps: self.solve_steps,
            learning_rate: self.solve_learning_rate,
            init_scale: self.inner_init_scale,
            restarts: self.solve_restarts,
            store_trajectory: false,
            early_stop: (self.solve_early_stop > 0.0).then_some(self.solve_early_stop),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lambda: self.lambda,
            alpha: self.alpha,
            inner: self.inner_config(),
            seed: self.seed,
            mode: self.mode,
            workers: self.workers,
        }
    }

    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            delta: self.delta,
            heavy_only: self.heavy_only,
            generated_multiplier: self.multiplier,
            workers: self.workers,
        }
    }

    pub fn mmd_config(&self) -> MmdConfig {
        MmdConfig { bandwidth: self.mmd_bandwidth }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.solve_config().validate()?;
        self.metric_config().validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if let Bandwidth::Fixed(s) = self.mmd_bandwidth {
            if !(s > 0.0) {
                return Err(Error::Config("mmd_bandwidth must be positive".into()));
            }
        }
        Ok(())
    }
}
