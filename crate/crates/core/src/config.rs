//! Run configuration: a flat `key = value` text format.
//!
//! Values are resolved in order of precedence: explicit overrides (command
//! line flags), then the config file, then `MCRNET_SEED` for the seed, then
//! built-in defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricOptions;
use crate::model::ModelConfig;
use crate::predictor::{DecodeOptions, LossWeights};

pub const SEED_ENV: &str = "MCRNET_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Relation blocks J.
    pub steps: usize,
    pub share_weights: bool,
    pub lambda_span: f64,
    pub lambda_ans: f64,
    pub threshold: f64,
    pub max_answer_len: usize,
    pub sentinel_vote: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub rouge_beta: f64,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            max_len: 128,
            dropout: 0.1,
            steps: 2,
            share_weights: true,
            lambda_span: 0.7,
            lambda_ans: 0.3,
            threshold: 0.3,
            max_answer_len: 30,
            sentinel_vote: false,
            lr: 1e-3,
            batch_size: 32,
            epochs: 2,
            seed: 0,
            rouge_beta: 1.2,
            train_path: None,
            dev_path: None,
        }
    }
}

pub const KEYS: [&str; 20] = [
    "hidden",
    "layers",
    "heads",
    "ffn",
    "max_len",
    "dropout",
    "steps",
    "share_weights",
    "lambda_span",
    "lambda_ans",
    "threshold",
    "max_answer_len",
    "sentinel_vote",
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "rouge_beta",
    "train_path",
    "dev_path",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "hidden" => self.hidden = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn" => self.ffn = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "share_weights" => self.share_weights = parse(key, value)?,
            "lambda_span" => self.lambda_span = parse(key, value)?,
            "lambda_ans" => self.lambda_ans = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "max_answer_len" => self.max_answer_len = parse(key, value)?,
            "sentinel_vote" => self.sentinel_vote = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "rouge_beta" => self.rouge_beta = parse(key, value)?,
            "train_path" => self.train_path = optional_path(value),
            "dev_path" => self.dev_path = optional_path(value),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        match key {
            "hidden" => self.hidden.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "ffn" => self.ffn.to_string(),
            "max_len" => self.max_len.to_string(),
            "dropout" => self.dropout.to_string(),
            "steps" => self.steps.to_string(),
            "share_weights" => self.share_weights.to_string(),
            "lambda_span" => self.lambda_span.to_string(),
            "lambda_ans" => self.lambda_ans.to_string(),
            "threshold" => self.threshold.to_string(),
            "max_answer_len" => self.max_answer_len.to_string(),
            "sentinel_vote" => self.sentinel_vote.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "rouge_beta" => self.rouge_beta.to_string(),
            "train_path" => path(&self.train_path),
            "dev_path" => path(&self.dev_path),
            _ => unreachable!("key list and accessor disagree"),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    n + 1
                ))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Defaults, then `env_seed`, then `file`, then `overrides`.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[(String, String)],
        env_seed: Option<&str>,
    ) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(seed) = env_seed {
            c.set("seed", seed)
                .map_err(|e| Error::Config(format!("{SEED_ENV}: {e}")))?;
        }
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            c.apply_text(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config(16).validate()?;
        self.loss_weights()?;
        let positive = [("lr", self.lr), ("rouge_beta", self.rouge_beta)];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.max_answer_len == 0 || self.ffn == 0 {
            return Err(Error::Config(
                "batch_size, max_answer_len and ffn must be positive".into(),
            ));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config(format!(
                "threshold must be finite, got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda_span, self.lambda_ans)
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            max_len: self.max_len,
            vocab_size,
            dropout: self.dropout,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            encoder: self.encoder_config(vocab_size),
            steps: self.steps,
            share_weights: self.share_weights,
            loss: self.loss_weights()?,
        })
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            threshold: self.threshold,
            max_answer_len: self.max_answer_len,
            sentinel_vote: self.sentinel_vote,
        }
    }

    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            threshold: self.threshold,
            rouge_beta: self.rouge_beta,
        }
    }
}
