//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every key
//! has a default and unknown keys are rejected. Lists are comma separated.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{DatasetKind, ToyDatasetSpec};
use crate::diffusion::{DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_TOTAL_STEPS};
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::generator::{CostModel, GenBudget};
use crate::minmax::BufferScope;
use crate::model::{ClassEmbeddingMode, DenoiserConfig};
use crate::nn::Activation;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecKind {
    Identity,
    /// Square linear codec with a seeded random orthonormal encoder.
    Orthonormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockKind {
    Real,
    PerBatch,
    PerStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub activation: Activation,
    pub class_embedding: ClassEmbeddingMode,
    pub codec: CodecKind,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            time_dim: 16,
            activation: Activation::Tanh,
            class_embedding: ClassEmbeddingMode::OneHot,
            codec: CodecKind::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: ToyDatasetSpec,
    pub total_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub budget_secs: f64,
    pub gen_batch_size: usize,
    pub steps: usize,
    pub clock: ClockKind,
    /// Seconds per batch (`per_batch`) or per step of a batch (`per_step`).
    pub simulated_cost: f64,
    pub eval: EvalConfig,
    pub sweep_steps: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: ToyDatasetSpec::default(),
            total_steps: DEFAULT_TOTAL_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            budget_secs: 600.0,
            gen_batch_size: 8,
            steps: 10,
            clock: ClockKind::Real,
            simulated_cost: 0.5,
            eval: EvalConfig::default(),
            sweep_steps: vec![5, 10, 15, 20, 25, 30],
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn num_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

impl RunConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn denoiser_config(&self, latent_dim: usize, num_classes: usize) -> DenoiserConfig {
        DenoiserConfig {
            latent_dim,
            num_classes,
            total_steps: self.total_steps,
            time_dim: self.model.time_dim,
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
            class_embedding: self.model.class_embedding,
        }
    }

    pub fn cost_model(&self) -> CostModel {
        match self.clock {
            ClockKind::Real => CostModel::Real,
            ClockKind::PerBatch => CostModel::FixedPerBatch(self.simulated_cost),
            ClockKind::PerStep => CostModel::PerStep(self.simulated_cost),
        }
    }

    pub fn gen_budget(&self) -> GenBudget {
        GenBudget {
            budget_secs: self.budget_secs,
            clock: self.cost_model(),
            batch_size: self.gen_batch_size,
            steps: self.steps,
        }
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let e = &self.eval;
        let d = &self.dataset;
        let m = &self.model;
        vec![
            ("seed", self.seed.to_string()),
            ("dataset_kind", d.kind.name().into()),
            ("classes", d.classes.to_string()),
            ("dim", d.dim.to_string()),
            ("samples_per_class", d.samples_per_class.to_string()),
            ("separation", d.separation.to_string()),
            ("T", self.total_steps.to_string()),
            ("beta_min", self.beta_min.to_string()),
            ("beta_max", self.beta_max.to_string()),
            ("hidden", list(&m.hidden)),
            ("time_dim", m.time_dim.to_string()),
            ("activation", m.activation.name().into()),
            (
                "class_embedding",
                match m.class_embedding {
                    ClassEmbeddingMode::OneHot => "one_hot".into(),
                    ClassEmbeddingMode::Learned { width } => format!("learned:{width}"),
                },
            ),
            (
                "codec",
                match m.codec {
                    CodecKind::Identity => "identity".into(),
                    CodecKind::Orthonormal => "orthonormal".into(),
                },
            ),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("adam_beta1", t.beta1.to_string()),
            ("adam_beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("lambda_r", t.lambda_r.to_string()),
            ("lambda_d", t.lambda_d.to_string()),
            (
                "grad_clip",
                t.grad_clip.map_or_else(|| "none".into(), |c| c.to_string()),
            ),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("buffer_capacity", t.buffer_capacity.to_string()),
            ("buffer_scope", t.buffer_scope.name().into()),
            ("steps", self.steps.to_string()),
            ("budget_secs", self.budget_secs.to_string()),
            ("gen_batch_size", self.gen_batch_size.to_string()),
            (
                "clock",
                match self.clock {
                    ClockKind::Real => "real",
                    ClockKind::PerBatch => "per_batch",
                    ClockKind::PerStep => "per_step",
                }
                .into(),
            ),
            ("simulated_cost", self.simulated_cost.to_string()),
            ("eval_hidden", list(&e.hidden)),
            ("eval_learning_rate", e.learning_rate.to_string()),
            ("eval_momentum", e.momentum.to_string()),
            ("eval_weight_decay", e.weight_decay.to_string()),
            ("eval_epochs", e.epochs.to_string()),
            ("eval_batch_size", e.batch_size.to_string()),
            ("eval_repeats", e.repeats.to_string()),
            ("sweep_steps", list(&self.sweep_steps)),
        ]
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("{key}: unknown {what} {v:?}"));
        match key {
            "seed" => self.set_seed(num(key, v)?),
            "dataset_kind" => {
                self.dataset.kind = DatasetKind::parse(v).ok_or_else(|| bad("dataset kind"))?
            }
            "classes" => self.dataset.classes = num(key, v)?,
            "dim" => self.dataset.dim = num(key, v)?,
            "samples_per_class" => self.dataset.samples_per_class = num(key, v)?,
            "separation" => self.dataset.separation = num(key, v)?,
            "T" => self.total_steps = num(key, v)?,
            "beta_min" => self.beta_min = num(key, v)?,
            "beta_max" => self.beta_max = num(key, v)?,
            "hidden" => self.model.hidden = num_list(key, v)?,
            "time_dim" => self.model.time_dim = num(key, v)?,
            "activation" => {
                self.model.activation = Activation::parse(v).ok_or_else(|| bad("activation"))?
            }
            "class_embedding" => {
                self.model.class_embedding = match v {
                    "one_hot" => ClassEmbeddingMode::OneHot,
                    _ => match v.strip_prefix("learned:") {
                        Some(w) => ClassEmbeddingMode::Learned {
                            width: num(key, w)?,
                        },
                        None => return Err(bad("class embedding")),
                    },
                }
            }
            "codec" => {
                self.model.codec = match v {
                    "identity" => CodecKind::Identity,
                    "orthonormal" => CodecKind::Orthonormal,
                    _ => return Err(bad("codec")),
                }
            }
            "epochs" => self.train.epochs = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "learning_rate" => self.train.learning_rate = num(key, v)?,
            "adam_beta1" => self.train.beta1 = num(key, v)?,
            "adam_beta2" => self.train.beta2 = num(key, v)?,
            "adam_eps" => self.train.adam_eps = num(key, v)?,
            "lambda_r" => self.train.lambda_r = num(key, v)?,
            "lambda_d" => self.train.lambda_d = num(key, v)?,
            "grad_clip" => {
                self.train.grad_clip = match v {
                    "none" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "warmup_steps" => self.train.warmup_steps = num(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            "buffer_capacity" => self.train.buffer_capacity = num(key, v)?,
            "buffer_scope" => {
                self.train.buffer_scope =
                    BufferScope::parse(v).ok_or_else(|| bad("buffer scope"))?
            }
            "steps" => self.steps = num(key, v)?,
            "budget_secs" => self.budget_secs = num(key, v)?,
            "gen_batch_size" => self.gen_batch_size = num(key, v)?,
            "clock" => {
                self.clock = match v {
                    "real" => ClockKind::Real,
                    "per_batch" => ClockKind::PerBatch,
                    "per_step" => ClockKind::PerStep,
                    _ => return Err(bad("clock")),
                }
            }
            "simulated_cost" => self.simulated_cost = num(key, v)?,
            "eval_hidden" => self.eval.hidden = num_list(key, v)?,
            "eval_learning_rate" => self.eval.learning_rate = num(key, v)?,
            "eval_momentum" => self.eval.momentum = num(key, v)?,
            "eval_weight_decay" => self.eval.weight_decay = num(key, v)?,
            "eval_epochs" => self.eval.epochs = num(key, v)?,
            "eval_batch_size" => self.eval.batch_size = num(key, v)?,
            "eval_repeats" => self.eval.repeats = num(key, v)?,
            "sweep_steps" => self.sweep_steps = num_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Checks every section; failures are reported as config errors.
    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(strip_prefix(e)));
        wrap(self.dataset.validate())?;
        wrap(self.train.validate())?;
        wrap(self.eval.validate())?;
        wrap(self.gen_budget().validate())?;
        wrap(
            crate::diffusion::NoiseSchedule::linear(self.total_steps, self.beta_min, self.beta_max)
                .map(|_| ()),
        )?;
        wrap(
            self.denoiser_config(self.dataset.dim, self.dataset.classes)
                .validate(),
        )?;
        if self.steps > self.total_steps {
            return Err(Error::Config(format!(
                "steps {} exceeds T {}",
                self.steps, self.total_steps
            )));
        }
        if let Some(&s) = self
            .sweep_steps
            .iter()
            .find(|&&s| s == 0 || s > self.total_steps)
        {
            return Err(Error::Config(format!(
                "sweep step count {s} outside [1, T]"
            )));
        }
        if self.simulated_cost.is_nan() || self.simulated_cost <= 0.0 {
            return Err(Error::Config("simulated_cost must be positive".into()));
        }
        Ok(())
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) | Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}
