//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Every key has a default, so an
//! empty file is a valid configuration. [`RunConfig::to_text`] writes every key
//! and parses back to an identical value.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gbst::{Pooling, ScorerInit};
use crate::training::{OptimizerKind, Schedule, TrainConfig};
use crate::transformer::{Frontend, ModelConfig};

/// Where pre-training text comes from.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum CorpusSource {
    /// The toy corpus compiled into the library.
    #[default]
    Bundled,
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileConfig {
    pub length: usize,
    /// Timed steps per configuration; 0 skips wall-clock measurement.
    pub bench_steps: usize,
    pub bench_batch: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { length: 1024, bench_steps: 10, bench_batch: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seeds: usize,
    /// Coordinates sampled per parameter tensor.
    pub samples: usize,
    pub input_length: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seeds: 10, samples: 6, input_length: 24, step: 1e-5, tolerance: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSource,
    /// `text<TAB>label` lines for fine-tuning.
    pub finetune_data: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub profile: ProfileConfig,
    pub gradcheck: GradcheckConfig,
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Parse { line, msg: format!("bad value `{value}` for `{key}`: {e}") })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Parse { line, msg: format!("bad boolean `{value}` for `{key}`") }),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Defaults for fine-tuning: constant learning rate 1e-3, GBST frozen.
    pub fn finetune_defaults() -> Self {
        Self { train: TrainConfig::finetune(), ..Self::default() }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(text, Self::default())
    }

    /// Applies the settings in `text` on top of `base`.
    pub fn parse_over(text: &str, base: Self) -> Result<Self> {
        let mut cfg = base;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, got `{content}`") })?;
            cfg.set(line, key.trim(), value.trim())?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    fn sync(&mut self) {
        self.model.gbst.embedding_dim = self.model.stack.d_model;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let s = &mut self.model.stack;
        let g = &mut self.model.gbst;
        let t = &mut self.train;
        match key {
            "model.frontend" => {
                s.frontend = match v {
                    "gbst" => Frontend::Gbst,
                    "identity" => Frontend::Identity,
                    _ => return Err(Error::Parse { line, msg: format!("frontend must be gbst or identity, got `{v}`") }),
                }
            }
            "model.encoder_layers" => s.encoder_layers = parse_value(line, key, v)?,
            "model.decoder_layers" => s.decoder_layers = parse_value(line, key, v)?,
            "model.d_model" => s.d_model = parse_value(line, key, v)?,
            "model.heads" => s.heads = parse_value(line, key, v)?,
            "model.d_kv" => s.d_kv = parse_value(line, key, v)?,
            "model.d_ff" => s.d_ff = parse_value(line, key, v)?,
            "model.max_source_len" => s.max_source_len = parse_value(line, key, v)?,
            "model.max_target_len" => s.max_target_len = parse_value(line, key, v)?,
            "gbst.max_block_size" => g.max_block_size = parse_value(line, key, v)?,
            "gbst.downsample_rate" => g.downsample_rate = parse_value(line, key, v)?,
            "gbst.conv_kernel_size" => {
                g.conv_kernel_size = match v {
                    "none" | "0" => None,
                    _ => Some(parse_value(line, key, v)?),
                }
            }
            "gbst.offsets" => g.enable_offsets = parse_bool(line, key, v)?,
            "gbst.calibration" => g.enable_calibration = parse_bool(line, key, v)?,
            "gbst.pooling" => {
                g.pooling = match v {
                    "mean" => Pooling::Mean,
                    _ => return Err(Error::Parse { line, msg: format!("pooling must be mean, got `{v}`") }),
                }
            }
            "gbst.scorer_init" => {
                self.model.scorer_init = match v {
                    "normal" => ScorerInit::Normal,
                    "zeros" => ScorerInit::Zeros,
                    _ => return Err(Error::Parse { line, msg: format!("scorer_init must be normal or zeros, got `{v}`") }),
                }
            }
            "train.batch_size" => t.batch_size = parse_value(line, key, v)?,
            "train.steps" => t.steps = parse_value(line, key, v)?,
            "train.learning_rate" => t.learning_rate = parse_value(line, key, v)?,
            "train.schedule" => {
                t.schedule = match v {
                    "constant" => Schedule::Constant,
                    "inverse_sqrt" => Schedule::InverseSqrt,
                    _ => return Err(Error::Parse { line, msg: format!("schedule must be constant or inverse_sqrt, got `{v}`") }),
                }
            }
            "train.warmup_steps" => t.warmup_steps = parse_value(line, key, v)?,
            "train.seed" => t.seed = parse_value(line, key, v)?,
            "train.freeze_gbst" => t.freeze_gbst = parse_bool(line, key, v)?,
            "train.optimizer" => {
                t.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(Error::Parse { line, msg: format!("optimizer must be adam or sgd, got `{v}`") }),
                }
            }
            "train.clip_norm" => {
                t.clip_norm = match v {
                    "none" => None,
                    _ => Some(parse_value(line, key, v)?),
                }
            }
            "train.input_length" => t.input_length = parse_value(line, key, v)?,
            "train.corruption_rate" => t.corruption_rate = parse_value(line, key, v)?,
            "train.mean_span" => t.mean_span = parse_value(line, key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_value(line, key, v)?,
            "data.corpus" => {
                self.corpus = match v {
                    "bundled" => CorpusSource::Bundled,
                    _ => CorpusSource::File(PathBuf::from(v)),
                }
            }
            "data.finetune" => self.finetune_data = parse_path(v),
            "data.init_checkpoint" => self.init_checkpoint = parse_path(v),
            "profile.length" => self.profile.length = parse_value(line, key, v)?,
            "profile.bench_steps" => self.profile.bench_steps = parse_value(line, key, v)?,
            "profile.bench_batch" => self.profile.bench_batch = parse_value(line, key, v)?,
            "gradcheck.seeds" => self.gradcheck.seeds = parse_value(line, key, v)?,
            "gradcheck.samples" => self.gradcheck.samples = parse_value(line, key, v)?,
            "gradcheck.input_length" => self.gradcheck.input_length = parse_value(line, key, v)?,
            "gradcheck.step" => self.gradcheck.step = parse_value(line, key, v)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = parse_value(line, key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let s = &self.model.stack;
        let g = &self.model.gbst;
        let t = &self.train;
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let lines: Vec<(&str, String)> = vec![
            ("model.frontend", match s.frontend { Frontend::Gbst => "gbst", Frontend::Identity => "identity" }.into()),
            ("model.encoder_layers", s.encoder_layers.to_string()),
            ("model.decoder_layers", s.decoder_layers.to_string()),
            ("model.d_model", s.d_model.to_string()),
            ("model.heads", s.heads.to_string()),
            ("model.d_kv", s.d_kv.to_string()),
            ("model.d_ff", s.d_ff.to_string()),
            ("model.max_source_len", s.max_source_len.to_string()),
            ("model.max_target_len", s.max_target_len.to_string()),
            ("gbst.max_block_size", g.max_block_size.to_string()),
            ("gbst.downsample_rate", g.downsample_rate.to_string()),
            ("gbst.conv_kernel_size", g.conv_kernel_size.map_or("none".into(), |k| k.to_string())),
            ("gbst.offsets", g.enable_offsets.to_string()),
            ("gbst.calibration", g.enable_calibration.to_string()),
            ("gbst.pooling", "mean".into()),
            ("gbst.scorer_init", match self.model.scorer_init { ScorerInit::Normal => "normal", ScorerInit::Zeros => "zeros" }.into()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.schedule", match t.schedule { Schedule::Constant => "constant", Schedule::InverseSqrt => "inverse_sqrt" }.into()),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.freeze_gbst", t.freeze_gbst.to_string()),
            ("train.optimizer", match t.optimizer { OptimizerKind::Adam => "adam", OptimizerKind::Sgd => "sgd" }.into()),
            ("train.clip_norm", t.clip_norm.map_or("none".into(), |c| c.to_string())),
            ("train.input_length", t.input_length.to_string()),
            ("train.corruption_rate", t.corruption_rate.to_string()),
            ("train.mean_span", t.mean_span.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("data.corpus", match &self.corpus { CorpusSource::Bundled => "bundled".into(), CorpusSource::File(p) => p.display().to_string() }),
            ("data.finetune", opt_path(&self.finetune_data)),
            ("data.init_checkpoint", opt_path(&self.init_checkpoint)),
            ("profile.length", self.profile.length.to_string()),
            ("profile.bench_steps", self.profile.bench_steps.to_string()),
            ("profile.bench_batch", self.profile.bench_batch.to_string()),
            ("gradcheck.seeds", self.gradcheck.seeds.to_string()),
            ("gradcheck.samples", self.gradcheck.samples.to_string()),
            ("gradcheck.input_length", self.gradcheck.input_length.to_string()),
            ("gradcheck.step", self.gradcheck.step.to_string()),
            ("gradcheck.tolerance", self.gradcheck.tolerance.to_string()),
        ];
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
