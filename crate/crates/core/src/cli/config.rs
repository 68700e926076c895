use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::objective::ObjectiveParams;
use crate::runtime::RuntimeConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchSettings {
    pub population: usize,
    pub generations: usize,
    pub elite_frac: f64,
    pub alpha: f64,
    pub floor: f64,
    pub seed: u64,
    /// Square proxy resolution.
    pub input_size: usize,
    pub proxy_per_class: usize,
    pub proxy_epochs: usize,
    pub proxy_batch_size: usize,
    pub proxy_learning_rate: f32,
    pub parallel: bool,
    pub stages_min: usize,
    pub stages_max: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            population: 8,
            generations: 5,
            elite_frac: 0.25,
            alpha: 0.5,
            floor: 0.02,
            seed: 0,
            input_size: 64,
            proxy_per_class: 50,
            proxy_epochs: 2,
            proxy_batch_size: 32,
            proxy_learning_rate: 0.01,
            parallel: false,
            stages_min: 3,
            stages_max: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSettings {
    /// `synthetic` or a NEU-format directory.
    pub source: String,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { source: "synthetic".into(), per_class: 300, seed: 42 }
    }
}

/// Settings for every subcommand, grouped by key prefix.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AppConfig {
    pub objective: ObjectiveParams,
    pub search: SearchSettings,
    pub train: TrainConfig,
    pub runtime: RuntimeConfig,
    pub data: DataSettings,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` cannot be `{value}`: expected {expected}")]
    Type { line: usize, key: String, value: String, expected: &'static str },
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("environment: {0}")]
    Env(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse<T: std::str::FromStr>(line: usize, key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Type { line, key: key.into(), value: value.into(), expected })
}

fn flag(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(ConfigError::Type { line, key: key.into(), value: value.into(), expected: "a boolean" }),
    }
}

impl AppConfig {
    /// Sets one dotted key. `line` is only used in error messages.
    pub fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        const INT: &str = "a non-negative integer";
        const REAL: &str = "a number";
        let (o, s, t, d) = (&mut self.objective, &mut self.search, &mut self.train, &mut self.data);
        match key {
            "objective.kappa" => o.kappa = parse(line, key, value, REAL)?,
            "objective.beta" => o.beta = parse(line, key, value, REAL)?,
            "objective.gamma" => o.gamma = parse(line, key, value, REAL)?,
            "objective.budget_flops" => o.budget_flops = parse(line, key, value, INT)?,
            "objective.tolerance" => o.tolerance = parse(line, key, value, REAL)?,
            "search.population" => s.population = parse(line, key, value, INT)?,
            "search.generations" => s.generations = parse(line, key, value, INT)?,
            "search.elite_frac" => s.elite_frac = parse(line, key, value, REAL)?,
            "search.alpha" => s.alpha = parse(line, key, value, REAL)?,
            "search.floor" => s.floor = parse(line, key, value, REAL)?,
            "search.seed" => s.seed = parse(line, key, value, INT)?,
            "search.input_size" => s.input_size = parse(line, key, value, INT)?,
            "search.proxy_per_class" => s.proxy_per_class = parse(line, key, value, INT)?,
            "search.proxy_epochs" => s.proxy_epochs = parse(line, key, value, INT)?,
            "search.proxy_batch_size" => s.proxy_batch_size = parse(line, key, value, INT)?,
            "search.proxy_learning_rate" => s.proxy_learning_rate = parse(line, key, value, REAL)?,
            "search.parallel" => s.parallel = flag(line, key, value)?,
            "search.stages_min" => s.stages_min = parse(line, key, value, INT)?,
            "search.stages_max" => s.stages_max = parse(line, key, value, INT)?,
            "train.learning_rate" => t.learning_rate = parse(line, key, value, REAL)?,
            "train.momentum" => t.momentum = parse(line, key, value, REAL)?,
            "train.weight_decay" => t.weight_decay = parse(line, key, value, REAL)?,
            "train.epochs" => t.epochs = parse(line, key, value, INT)?,
            "train.batch_size" => t.batch_size = parse(line, key, value, INT)?,
            "train.seed" => t.seed = parse(line, key, value, INT)?,
            "train.augment" => t.augment = flag(line, key, value)?,
            "train.step_decay" => t.step_decay = flag(line, key, value)?,
            "data.source" => d.source = value.to_string(),
            "data.per_class" => d.per_class = parse(line, key, value, INT)?,
            "data.seed" => d.seed = parse(line, key, value, INT)?,
            _ => match key.strip_prefix("runtime.") {
                Some(k) => self.runtime.set(k, value).map_err(|e| match e {
                    crate::runtime::RuntimeError::Config { .. } if !is_runtime_key(k) => {
                        ConfigError::UnknownKey { line, key: key.into() }
                    }
                    _ => ConfigError::Type { line, key: key.into(), value: value.into(), expected: "a valid runtime setting" },
                })?,
                None => return Err(ConfigError::UnknownKey { line, key: key.into() }),
            },
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.merge(text)?;
        Ok(cfg)
    }

    pub fn merge(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(i + 1, key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// `TDN_*` overrides of the runtime keys.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        self.runtime.apply_env(lookup).map_err(|e| ConfigError::Env(e.to_string()))
    }
}

fn is_runtime_key(k: &str) -> bool {
    crate::runtime::ENV_KEYS.iter().any(|e| e.trim_start_matches("TDN_").eq_ignore_ascii_case(k))
}

/// Defaults, then the file (if any), then `TDN_*` environment overrides.
pub fn load_config(path: Option<&Path>) -> Result<AppConfig, ConfigError> {
    let mut cfg = match path {
        Some(p) => AppConfig::parse(&std::fs::read_to_string(p)?)?,
        None => AppConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    Ok(cfg)
}
