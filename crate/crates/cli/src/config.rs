//! Plain-text `key = value` configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Training
//! keys mirror [`TrainConfig`]; the rest select paths and task options.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use tcgan::training::TrainConfig;

use crate::error::CliError;

/// Every key with a one-line description, in emission order.
pub const KEYS: &[(&str, &str)] = &[
    ("image", "training or input image (PNG/JPEG)"),
    ("out", "output directory"),
    ("checkpoint", "checkpoint to sample from or harmonize with"),
    ("samples", "number of images written by `sample`"),
    ("sr_target", "long-edge size of the super-resolved output"),
    ("inject_stage", "stage that receives the composite in `harmonize`"),
    ("mask", "optional paste mask for harmonization blending"),
    ("feather", "blur radius in pixels applied to the mask"),
    ("metric_name", "column name of the external metric in `eval`"),
    ("metric_cmd", "external metric command; {a} and {b} become the two paths"),
    ("stages", "number of scales N"),
    ("iters", "iterations per stage"),
    ("n_deep", "generator updates per iteration"),
    ("gamma", "reconstruction-loss weight"),
    ("r", "scale-schedule constant"),
    ("min_size", "shorter side at stage 1"),
    ("max_size", "longer side at the last stage, or none"),
    ("latent", "latent size S"),
    ("tokens", "global grid side"),
    ("channels", "feature channels C"),
    ("heads", "attention heads"),
    ("encoder_blocks", "transformer encoder blocks"),
    ("mlp_ratio", "encoder MLP hidden width as a multiple of L"),
    ("dropout", "encoder dropout rate"),
    ("lambda_gp", "gradient-penalty weight"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("critic_width", "critic conv width"),
    ("critic_layers", "critic conv layers"),
    ("critic_norm", "instance norm in the critic"),
    ("seed", "random seed"),
    ("precision", "f32 or f64"),
    ("deterministic", "omit wall-clock timings so reruns are byte-identical"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub image: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub samples: usize,
    pub sr_target: Option<usize>,
    pub inject_stage: usize,
    pub mask: Option<PathBuf>,
    pub feather: usize,
    pub metric_name: String,
    pub metric_cmd: Option<String>,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            train: TrainConfig::default(),
            image: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            samples: 5,
            sr_target: None,
            inject_stage: 1,
            mask: None,
            feather: 3,
            metric_name: "external".into(),
            metric_cmd: None,
        }
    }
}

fn is_train_key(key: &str) -> bool {
    matches!(serde_json::to_value(TrainConfig::default()), Ok(Value::Object(m)) if m.contains_key(key))
}

fn optional(v: &str) -> Option<&str> {
    match v {
        "" | "none" => None,
        s => Some(s),
    }
}

/// Literal for a training key: JSON numbers, booleans and `none`, else a string.
fn train_value(v: &str) -> Value {
    if v == "none" {
        return Value::Null;
    }
    match serde_json::from_str::<Value>(v) {
        Ok(x @ (Value::Number(_) | Value::Bool(_))) => x,
        _ => Value::String(v.to_string()),
    }
}

fn show(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl CliConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let at = |line: usize, msg: String| CliError::Usage(format!("{}:{line}: {msg}", origin.display()));
        let mut cfg = CliConfig::default();
        let mut train = match serde_json::to_value(&cfg.train) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(at(n, format!("expected `key = value`, got {line:?}")));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(at(n, format!("unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(at(n, format!("duplicate key `{key}`")));
            }
            let number = |v: &str| v.parse::<usize>().map_err(|_| at(n, format!("`{key}` must be a non-negative integer, got {v:?}")));
            match key {
                "image" => cfg.image = optional(value).map(PathBuf::from),
                "out" => cfg.out = PathBuf::from(value),
                "checkpoint" => cfg.checkpoint = optional(value).map(PathBuf::from),
                "samples" => cfg.samples = number(value)?,
                "sr_target" => cfg.sr_target = optional(value).map(number).transpose()?,
                "inject_stage" => cfg.inject_stage = number(value)?,
                "mask" => cfg.mask = optional(value).map(PathBuf::from),
                "feather" => cfg.feather = number(value)?,
                "metric_name" => cfg.metric_name = value.to_string(),
                "metric_cmd" => cfg.metric_cmd = optional(value).map(str::to_string),
                k if is_train_key(k) => {
                    train.insert(k.to_string(), train_value(value));
                    cfg.train = serde_json::from_value(Value::Object(train.clone()))
                        .map_err(|e| at(n, format!("`{key}`: {e}")))?;
                }
                _ => unreachable!("listed in KEYS"),
            }
        }
        cfg.train.validate().map_err(|e| CliError::Usage(format!("{}: {e}", origin.display())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// The configuration as a documented config file that parses back to `self`.
    pub fn emit(&self) -> String {
        let train = match serde_json::to_value(&self.train) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut out = String::new();
        for (key, doc) in KEYS {
            let value = match *key {
                "image" => path(&self.image),
                "out" => self.out.display().to_string(),
                "checkpoint" => path(&self.checkpoint),
                "samples" => self.samples.to_string(),
                "sr_target" => self.sr_target.map_or("none".into(), |v| v.to_string()),
                "inject_stage" => self.inject_stage.to_string(),
                "mask" => path(&self.mask),
                "feather" => self.feather.to_string(),
                "metric_name" => self.metric_name.clone(),
                "metric_cmd" => self.metric_cmd.clone().unwrap_or_else(|| "none".into()),
                k => train.get(k).map(show).unwrap_or_default(),
            };
            let _ = writeln!(out, "# {doc}\n{key} = {value}");
        }
        out
    }
}
