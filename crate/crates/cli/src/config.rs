//! Flat `key = value` run configuration with dotted section prefixes.
//!
//! Later assignments win: the config file is applied first, then `--set`
//! overrides, then dedicated command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ssept::dataio::{Delimiter, FormatSpec};
use ssept::evaluation::EvalConfig;
use ssept::model::ModelConfig;
use ssept::regularization::{DecayConfig, SseConfig};
use ssept::training::{LossKind, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_path: Option<PathBuf>,
    pub delimiter: String,
    pub strict: bool,
    pub min_user_count: usize,
    pub min_item_count: usize,
    /// Keep a seeded random subset of this many users; `0` keeps all.
    pub sample_users: usize,
    pub cache: PathBuf,
    /// Defaults to `<output>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub output: PathBuf,
    pub d_user: usize,
    pub d_item: usize,
    pub max_len: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub personalized: bool,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub train_negatives: usize,
    pub sampling_prob: f64,
    pub weight_decay: f64,
    pub sse_enabled: bool,
    pub p_user: f64,
    pub p_input_item: f64,
    pub p_output_item: f64,
    pub k: usize,
    pub eval_negatives: usize,
    pub ablate_axis: Option<String>,
    pub ablate_values: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let sse = SseConfig::default();
        RunConfig {
            seed: 0,
            data_path: None,
            delimiter: "tab".into(),
            strict: false,
            min_user_count: 1,
            min_item_count: 1,
            sample_users: 0,
            cache: PathBuf::from("sequences.cache"),
            checkpoint: None,
            output: PathBuf::from("run"),
            d_user: 50,
            d_item: 50,
            max_len: 200,
            blocks: 2,
            dropout: 0.2,
            personalized: true,
            learning_rate: train.learning_rate,
            beta1: train.beta1,
            beta2: train.beta2,
            adam_epsilon: train.adam_epsilon,
            batch_size: train.batch_size,
            epochs: train.epochs,
            loss: train.loss,
            train_negatives: train.negatives_per_positive,
            sampling_prob: train.sampling_prob,
            weight_decay: train.decay.lambda,
            sse_enabled: true,
            p_user: sse.p_user,
            p_input_item: sse.p_input_item,
            p_output_item: sse.p_output_item,
            k: train.eval.k,
            eval_negatives: train.eval.negatives,
            ablate_axis: None,
            ablate_values: Vec::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(CliError::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "data.path" => self.data_path = Some(PathBuf::from(v)),
            "data.delimiter" => {
                v.parse::<Delimiter>().map_err(|e| CliError::Config(e.to_string()))?;
                self.delimiter = v.to_string();
            }
            "data.strict" => self.strict = parse_bool(key, v)?,
            "data.min_user_count" => self.min_user_count = parse(key, v)?,
            "data.min_item_count" => self.min_item_count = parse(key, v)?,
            "data.sample_users" => self.sample_users = parse(key, v)?,
            "paths.cache" => self.cache = PathBuf::from(v),
            "paths.checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "paths.output" => self.output = PathBuf::from(v),
            "model.d_u" => self.d_user = parse(key, v)?,
            "model.d_i" => self.d_item = parse(key, v)?,
            "model.max_len" => self.max_len = parse(key, v)?,
            "model.blocks" => self.blocks = parse(key, v)?,
            "model.dropout" => self.dropout = parse(key, v)?,
            "model.personalized" => self.personalized = parse_bool(key, v)?,
            "train.lr" => self.learning_rate = parse(key, v)?,
            "train.beta1" => self.beta1 = parse(key, v)?,
            "train.beta2" => self.beta2 = parse(key, v)?,
            "train.adam_eps" => self.adam_epsilon = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.loss" => self.loss = v.parse().map_err(|e: ssept::Error| CliError::Config(e.to_string()))?,
            "train.negatives" => self.train_negatives = parse(key, v)?,
            "train.sampling_prob" => self.sampling_prob = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "sse.enabled" => self.sse_enabled = parse_bool(key, v)?,
            "sse.p_u" => self.p_user = parse(key, v)?,
            "sse.p_i" => self.p_input_item = parse(key, v)?,
            "sse.p_y" => self.p_output_item = parse(key, v)?,
            "eval.k" => self.k = parse(key, v)?,
            "eval.negatives" => self.eval_negatives = parse(key, v)?,
            "ablate.axis" => self.ablate_axis = Some(v.to_string()),
            "ablate.values" => self.ablate_values = list(v),
            other => return Err(CliError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are
    /// ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| CliError::Config(format!("line {}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    /// Applies one `key=value` command-line override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k, v)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output.join("model.ckpt"))
    }

    pub fn format(&self) -> FormatSpec {
        FormatSpec {
            delimiter: self.delimiter.parse().expect("validated on assignment"),
            strict: self.strict,
        }
    }

    pub fn model_config(&self, n_users: usize, n_items: usize) -> ModelConfig {
        ModelConfig {
            n_users,
            n_items,
            d_user: if self.personalized { self.d_user } else { 0 },
            d_item: self.d_item,
            max_len: self.max_len,
            blocks: self.blocks,
            dropout: self.dropout,
        }
    }

    pub fn eval_config(&self, negatives: usize) -> EvalConfig {
        EvalConfig {
            k: self.k,
            negatives,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_epsilon: self.adam_epsilon,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            loss: self.loss,
            negatives_per_positive: self.train_negatives,
            sse: self.sse_enabled.then_some(SseConfig {
                p_user: self.p_user,
                p_input_item: self.p_input_item,
                p_output_item: self.p_output_item,
            }),
            decay: DecayConfig {
                lambda: self.weight_decay,
            },
            sampling_prob: self.sampling_prob,
            eval: self.eval_config(self.eval_negatives),
        }
    }

    /// Checks every component invariant that does not depend on the data.
    pub fn validate(&self) -> Result<(), CliError> {
        let contract = |e: ssept::Error| CliError::Config(e.to_string());
        self.model_config(1, 1).validate().map_err(contract)?;
        self.train_config().validate().map_err(contract)?;
        if self.min_user_count == 0 || self.min_item_count == 0 {
            return Err(CliError::Config("minimum counts must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, one `key = value` line each, in a
    /// fixed order. Feeding the text back through [`RunConfig::apply_text`]
    /// reproduces the configuration.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        line("seed", self.seed.to_string());
        if let Some(p) = &self.data_path {
            line("data.path", p.display().to_string());
        }
        line("data.delimiter", self.delimiter.clone());
        line("data.strict", self.strict.to_string());
        line("data.min_user_count", self.min_user_count.to_string());
        line("data.min_item_count", self.min_item_count.to_string());
        line("data.sample_users", self.sample_users.to_string());
        line("paths.cache", self.cache.display().to_string());
        line("paths.checkpoint", self.checkpoint_path().display().to_string());
        line("paths.output", self.output.display().to_string());
        line("model.d_u", self.d_user.to_string());
        line("model.d_i", self.d_item.to_string());
        line("model.max_len", self.max_len.to_string());
        line("model.blocks", self.blocks.to_string());
        line("model.dropout", format!("{:?}", self.dropout));
        line("model.personalized", self.personalized.to_string());
        line("train.lr", format!("{:?}", self.learning_rate));
        line("train.beta1", format!("{:?}", self.beta1));
        line("train.beta2", format!("{:?}", self.beta2));
        line("train.adam_eps", format!("{:?}", self.adam_epsilon));
        line("train.batch_size", self.batch_size.to_string());
        line("train.epochs", self.epochs.to_string());
        line("train.loss", self.loss.to_string());
        line("train.negatives", self.train_negatives.to_string());
        line("train.sampling_prob", format!("{:?}", self.sampling_prob));
        line("train.weight_decay", format!("{:?}", self.weight_decay));
        line("sse.enabled", self.sse_enabled.to_string());
        line("sse.p_u", format!("{:?}", self.p_user));
        line("sse.p_i", format!("{:?}", self.p_input_item));
        line("sse.p_y", format!("{:?}", self.p_output_item));
        line("eval.k", self.k.to_string());
        line("eval.negatives", self.eval_negatives.to_string());
        if let Some(a) = &self.ablate_axis {
            line("ablate.axis", a.clone());
        }
        if !self.ablate_values.is_empty() {
            line("ablate.values", self.ablate_values.join(","));
        }
        s
    }
}
