//! `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; every other line must set one
//! known key exactly once. Values are validated before any work starts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use satcn::model::ModelConfig;
use satcn::train::{LrSchedule, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    /// 1-based line, or `None` for whole-file checks.
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if let Some(k) = &self.key {
            write!(f, "`{k}`: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

pub const KEYS: &[&str] = &[
    "stages",
    "hidden",
    "bottleneck",
    "stacks",
    "blocks",
    "kernel",
    "fft_size",
    "hop",
    "seed",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "epochs",
    "shuffle_seed",
    "clip_norm",
    "lr_decay_every",
    "lr_decay_factor",
    "train_manifest",
    "eval_manifest",
];

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T, ConfigError> {
    raw.parse().map_err(|_| ConfigError {
        line: Some(line),
        key: Some(key.to_string()),
        message: format!("cannot parse `{raw}`"),
    })
}

/// Parses config text. Relative manifest paths resolve against `base`.
pub fn parse(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    let mut decay_every: Option<usize> = None;
    let mut decay_factor: Option<f64> = None;
    for (i, raw_line) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError {
                line: Some(n),
                key: None,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        let Some(&key) = KEYS.iter().find(|&&known| known == k) else {
            return Err(ConfigError {
                line: Some(n),
                key: Some(k.to_string()),
                message: "unknown key".into(),
            });
        };
        if seen.contains(&key) {
            return Err(ConfigError {
                line: Some(n),
                key: Some(k.to_string()),
                message: "set more than once".into(),
            });
        }
        seen.push(key);
        if v.is_empty() {
            return Err(ConfigError {
                line: Some(n),
                key: Some(k.to_string()),
                message: "missing value".into(),
            });
        }
        let m = &mut cfg.model;
        let t = &mut cfg.train;
        match key {
            "stages" => m.stages = value(n, key, v)?,
            "hidden" => m.hidden = value(n, key, v)?,
            "bottleneck" => m.bottleneck = value(n, key, v)?,
            "stacks" => m.stacks = value(n, key, v)?,
            "blocks" => m.blocks = value(n, key, v)?,
            "kernel" => m.kernel = value(n, key, v)?,
            "fft_size" => m.fft_size = value(n, key, v)?,
            "hop" => m.hop = value(n, key, v)?,
            "seed" => m.seed = value(n, key, v)?,
            "lr" => t.lr = value(n, key, v)?,
            "beta1" => t.beta1 = value(n, key, v)?,
            "beta2" => t.beta2 = value(n, key, v)?,
            "eps" => t.eps = value(n, key, v)?,
            "batch_size" => t.batch_size = value(n, key, v)?,
            "epochs" => t.epochs = value(n, key, v)?,
            "shuffle_seed" => t.seed = value(n, key, v)?,
            "clip_norm" => t.clip_norm = Some(value(n, key, v)?),
            "lr_decay_every" => decay_every = Some(value(n, key, v)?),
            "lr_decay_factor" => decay_factor = Some(value(n, key, v)?),
            "train_manifest" => cfg.train_manifest = Some(base.join(v)),
            "eval_manifest" => cfg.eval_manifest = Some(base.join(v)),
            _ => unreachable!("every key in KEYS is handled"),
        }
    }
    cfg.train.schedule = match (decay_every, decay_factor) {
        (None, None) => LrSchedule::Constant,
        (Some(every), Some(factor)) if every > 0 && factor > 0.0 && factor.is_finite() => {
            LrSchedule::StepDecay { every, factor }
        }
        (Some(_), Some(_)) => return Err(whole("lr_decay_every must be ≥ 1 and lr_decay_factor positive")),
        _ => return Err(whole("lr_decay_every and lr_decay_factor must be set together")),
    };
    cfg.model.validate().map_err(|e| whole(&e.to_string()))?;
    cfg.train.validate().map_err(|e| whole(&e.to_string()))?;
    Ok(cfg)
}

fn whole(message: &str) -> ConfigError {
    ConfigError {
        line: None,
        key: None,
        message: message.to_string(),
    }
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| whole(&format!("cannot read {}: {e}", path.display())))?;
    parse(&text, path.parent().unwrap_or(Path::new(".")))
}
